"""Exception hierarchy shared by the solver, the cost models and the CLI."""


class NegfError(Exception):
    """Base class for every failure raised by the package."""


class ConfigError(NegfError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"invalid {field}: {message}")


class PartitionError(ConfigError):
    def __init__(self, na: int, bnum: int):
        self.na = na
        self.bnum = bnum
        super().__init__("bnum", f"Na={na} is not divisible by bnum={bnum}")


class NeighborCountError(ConfigError):
    def __init__(self, kind: str, nb: int, reason: str = ""):
        self.kind = kind
        self.nb = nb
        detail = f" ({reason})" if reason else ""
        super().__init__("Nb", f"{kind} lattice cannot give {nb} neighbors per atom{detail}")


class GridMisalignmentError(ConfigError):
    pass


class DeviceFormatError(NegfError):
    pass


class HeaderError(DeviceFormatError):
    pass


class DimensionError(DeviceFormatError):
    pass


class HermiticityError(DeviceFormatError):
    def __init__(self, operator: str, block: tuple, deviation: float):
        self.operator = operator
        self.block = block
        self.deviation = deviation
        super().__init__(
            f"{operator} is not Hermitian at block {block} (max deviation {deviation:.3e})"
        )


class DimensionMismatchError(NegfError):
    pass


class MissingSparseEncodingError(NegfError):
    pass


class BoundaryConvergenceError(NegfError):
    def __init__(self, residual: float, iterations: int, point=None):
        self.residual = residual
        self.iterations = iterations
        self.point = point
        where = f" at point {point}" if point is not None else ""
        super().__init__(
            f"decimation did not converge after {iterations} steps{where} (residual {residual:.3e})"
        )

    def at(self, point) -> "BoundaryConvergenceError":
        return BoundaryConvergenceError(self.residual, self.iterations, point)


class CausalityError(NegfError):
    pass


class SingularBlockError(NegfError):
    def __init__(self, block_index: int, point=None):
        self.block_index = block_index
        self.point = point
        where = f" at point {point}" if point is not None else ""
        super().__init__(
            f"singular pivot in forward pass at block {block_index}{where}; increase eta"
        )


class PointFailures(NegfError):
    """Collects the per-point failures of one GF phase."""

    def __init__(self, failures: list):
        self.failures = failures
        lines = "; ".join(f"{point}: {err}" for point, err in failures[:5])
        more = f" (+{len(failures) - 5} more)" if len(failures) > 5 else ""
        super().__init__(f"{len(failures)} point(s) failed: {lines}{more}")


class MissingBondBlocksError(NegfError):
    pass


class DivergenceError(NegfError):
    def __init__(self, message: str, trace=None):
        self.trace = trace
        super().__init__(message)


class InfeasiblePlanError(ConfigError):
    def __init__(self, message: str):
        super().__init__("plan", message)
