"""Exception types shared across the planning pipeline."""


class ConfigError(ValueError):
    """Invalid geometry, beam, or pipeline configuration."""


class StateError(RuntimeError):
    """Operation called before its required state exists (e.g. unfrozen references)."""


class AugmentationRejected(RuntimeError):
    """An augmentation transform produced an unusable structure set (e.g. empty PTV)."""
