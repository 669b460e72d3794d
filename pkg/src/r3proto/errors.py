"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration values (sizes, thresholds, hyperparameters)."""


class ContractError(ValueError):
    """An operation received inputs that violate its contract (shapes, finiteness)."""


class IngestionError(RuntimeError):
    """A dataset directory could not be read into a manifest."""


class ValidationError(ValueError):
    """A submitted record failed field validation."""


class DuplicateRatingError(RuntimeError):
    """A rating with the same (image, prototype, model, rater) key already exists."""


class ServiceError(RuntimeError):
    """The rating service was used before its task pool was initialized."""


class TrainingDiverged(RuntimeError):
    """A training loop produced a non-finite loss."""
