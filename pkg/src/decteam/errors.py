"""Exception hierarchy shared by the solvers, filters and simulators."""


class DecTeamError(Exception):
    """Base class for all library errors."""


class SpecError(DecTeamError, ValueError):
    """A problem definition is malformed (bad shapes, missing blocks)."""


class IntegrationBlowup(DecTeamError, ArithmeticError):
    """A non-finite value appeared while integrating an ODE."""

    def __init__(self, node, what="solution"):
        self.node = int(node)
        super().__init__(f"integration blowup: {what} became non-finite at node {self.node}")


class NumericalDegeneracy(DecTeamError, ArithmeticError):
    """A covariance left the PSD cone beyond tolerance."""

    def __init__(self, node, min_eig):
        self.node = int(node)
        self.min_eig = float(min_eig)
        super().__init__(
            f"covariance lost positive semidefiniteness at node {self.node} "
            f"(smallest eigenvalue {self.min_eig:.3e})"
        )


class FixedPointSingular(DecTeamError, ArithmeticError):
    """The normalized coupling matrix of the mean-control system is singular."""

    def __init__(self, node, cond):
        self.node = int(node)
        self.cond = float(cond)
        super().__init__(
            f"fixed-point system singular at node {self.node} (condition number {self.cond:.3e})"
        )


class NonConvergence(DecTeamError):
    """The Picard iteration hit its iteration cap."""

    def __init__(self, residuals):
        self.residuals = list(residuals)
        last = self.residuals[-1] if self.residuals else float("nan")
        super().__init__(
            f"fixed point did not converge after {len(self.residuals)} iterations "
            f"(last residual {last:.3e})"
        )


class InadmissiblePerturbation(DecTeamError, ValueError):
    """A perturbation changes more than one decision maker's law."""
