/* An object with no executable section. */
int counter = 3;
