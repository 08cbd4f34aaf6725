"""Exception hierarchy shared by every stage of the pipeline."""


class PrashnaError(Exception):
    """Base class for all errors raised by this package."""


# -- decoding -----------------------------------------------------------------

class DecodeError(PrashnaError):
    pass


class TruncatedProgram(DecodeError):
    pass


class UnknownOpcode(DecodeError):
    def __init__(self, opcode, index, detail=""):
        self.opcode = opcode
        self.index = index
        msg = f"unknown opcode 0x{opcode:02x} at slot {index}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class BadRegister(DecodeError):
    def __init__(self, reg, index):
        self.reg = reg
        self.index = index
        where = f" at slot {index}" if index is not None else ""
        super().__init__(f"register r{reg} out of range{where}")


class ParseError(DecodeError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


# -- loading ------------------------------------------------------------------

class LoaderError(PrashnaError):
    pass


class NotElf(LoaderError):
    pass


class NoProgramSection(LoaderError):
    pass


class AmbiguousSection(LoaderError):
    pass


class UnresolvedMapRelocation(LoaderError):
    pass


class DuplicateMapName(LoaderError):
    pass


# -- netspec ------------------------------------------------------------------

class SpecError(PrashnaError):
    pass


class SpecParseError(SpecError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class OverlappingFields(SpecError):
    pass


class MissingDataRole(SpecError):
    pass


class UnknownProtocol(SpecError):
    pass


class UnknownHook(SpecError):
    pass


# -- control flow -------------------------------------------------------------

class CfgError(PrashnaError):
    pass


class JumpOutOfRange(CfgError):
    pass


class CycleDetected(CfgError):
    def __init__(self, src, dst):
        self.edge = (src, dst)
        super().__init__(f"back edge {src} -> {dst}: loops are not supported")


class PathBudgetExceeded(CfgError):
    def __init__(self, budget):
        self.budget = budget
        super().__init__(f"more than {budget} paths")


# -- analysis -----------------------------------------------------------------

class AnalysisError(PrashnaError):
    """A transfer-function failure, annotated with where it happened."""

    def __init__(self, message, path=None, block=None, index=None):
        self.path = path
        self.block = block
        self.index = index
        where = []
        if block is not None:
            where.append(f"block {block}")
        if index is not None:
            where.append(f"insn {index}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class StackOutOfRange(AnalysisError):
    pass


# -- facts / knowledge base ---------------------------------------------------

class FactsError(PrashnaError):
    pass


class DuplicateNfId(FactsError):
    pass


class KbParseError(FactsError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


# -- queries ------------------------------------------------------------------

class QueryError(PrashnaError):
    pass


class QuerySyntaxError(QueryError):
    def __init__(self, message, pos=None, expected=()):
        self.pos = pos
        self.expected = tuple(expected)
        if pos is not None:
            message = f"at offset {pos}: {message}"
        if expected:
            message += f" (expected {' or '.join(expected)})"
        super().__init__(message)


class UnknownPredicate(QueryError):
    pass


class ArityError(QueryError):
    pass


class EngineError(QueryError):
    pass


class UnboundNegation(EngineError):
    pass


class DepthExceeded(EngineError):
    pass


class ShadowsBuiltin(EngineError):
    pass


class UnstratifiedNegation(EngineError):
    pass
