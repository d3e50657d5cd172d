"""Exception types shared across the package."""


class ValidationError(ValueError):
    """An input violates a documented invariant or precondition."""


class SceneGenerationError(RuntimeError):
    """Rejection sampling of a random scene exhausted its attempt budget."""


class SingularityError(ValidationError):
    """A point source coincides with a microphone."""


class DegenerateCloudError(ValidationError):
    """Image-source cloud too small or rank-deficient for orientation."""


class AmbiguityError(ValidationError):
    """Tie between candidates that the algorithm cannot break."""


class MissingReflectionError(RuntimeError):
    """No first-order candidate found for a wall, even at the widest cone."""

    def __init__(self, wall: str):
        super().__init__(f"no first-order image source found for wall {wall}")
        self.wall = wall


class InconsistentBasisError(RuntimeError):
    """Recovered geometry is self-contradictory (e.g. non-positive length)."""


class AxisMatchingError(ValidationError):
    """Recovered axes could not be assigned one-to-one to ground-truth axes."""
