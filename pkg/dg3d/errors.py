from __future__ import annotations

from typing import Optional


class Dg3dError(Exception):
    pass


class GraphError(Dg3dError, RuntimeError):
    def __init__(self, message: str, node: Optional[object] = None) -> None:
        super().__init__(message)
        self.node = node


class NonFiniteError(Dg3dError, FloatingPointError):
    def __init__(self, message: str, where: Optional[str] = None) -> None:
        super().__init__(message)
        self.where = where


class ConfigError(Dg3dError, ValueError):
    def __init__(self, key: str, message: str) -> None:
        super().__init__(f"{key}: {message}")
        self.key = key


class CheckpointError(Dg3dError, ValueError):
    pass


class DegeneratePairError(Dg3dError, ArithmeticError):
    pass


class DegenerateGradientError(Dg3dError, ArithmeticError):
    pass


class EmptyMeshError(Dg3dError, ValueError):
    pass


class InvisibleMeshError(Dg3dError, ValueError):
    pass


class BackendError(Dg3dError, RuntimeError):
    def __init__(self, message: str, log: str = "") -> None:
        super().__init__(message if not log else f"{message}\n{log}")
        self.log = log
