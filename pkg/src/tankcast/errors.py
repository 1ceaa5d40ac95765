class InvalidArgument(ValueError):
    pass


class EmptyContext(ValueError):
    pass


class ReplayParseError(ValueError):
    def __init__(self, message: str, lineno: int):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class ReplayValidationError(ValueError):
    pass


class ScenarioError(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
