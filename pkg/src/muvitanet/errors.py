"""Exception hierarchy. Each class carries the CLI exit code and a short tag."""


class MuViTaNetError(Exception):
    exit_code = 1
    tag = "error"


# numerics
class DimensionError(MuViTaNetError, ValueError):
    tag = "dimension"


class DomainError(MuViTaNetError, ValueError):
    tag = "domain"


class DegenerateVectorError(DomainError):
    tag = "degenerate-vector"


class StateError(MuViTaNetError, RuntimeError):
    tag = "state"


class EvaluationError(MuViTaNetError, ArithmeticError):
    tag = "evaluation"


class OrderingError(DomainError):
    tag = "ordering"


class TaskKindError(MuViTaNetError, ValueError):
    tag = "task-kind"


# configuration
class ConfigError(MuViTaNetError, ValueError):
    exit_code = 2
    tag = "config"


# data
class DataError(MuViTaNetError, ValueError):
    exit_code = 3
    tag = "data"


class VocabularyError(DataError):
    tag = "vocabulary"


class ParseError(DataError):
    tag = "parse"


class ValidationError(DataError):
    tag = "validation"


class SpecError(DataError):
    tag = "spec"


class StratificationError(DataError):
    tag = "stratification"


class DegenerateRecordError(DataError):
    tag = "degenerate-record"


class LookupFailure(DataError):
    tag = "lookup"


class CompatibilityError(DataError):
    tag = "compatibility"


# training / evaluation
class TrainingDivergenceError(MuViTaNetError, ArithmeticError):
    exit_code = 4
    tag = "divergence"

    def __init__(self, task: str, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} on task {task!r} at step {step}")
        self.task = task
        self.step = step


class UndefinedMetricError(MuViTaNetError, ValueError):
    exit_code = 5
    tag = "metric-undefined"
