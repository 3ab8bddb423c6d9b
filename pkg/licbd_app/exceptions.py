"""
Exceptions raised by the backdoor toolkit.

Library code raises these; management commands turn any LicbdError into a
CommandError so the process exits non-zero with the message on stderr.
"""


class LicbdError(Exception):
    """Base class for all toolkit errors"""
    pass


class InvalidArgument(LicbdError, ValueError):
    """Raised when an operation is called with arguments outside its contract"""
    pass


class TrainingDiverged(LicbdError, RuntimeError):
    """Raised when a training loop produces a non-finite loss"""

    def __init__(self, step, components, objective=None):
        self.step = step
        self.components = dict(components)
        self.objective = objective
        parts = ', '.join(f'{name}={value}' for name, value in self.components.items())
        label = f' ({objective})' if objective else ''
        super().__init__(f'Training diverged at step {step}{label}: {parts}')


class PreprocessError(LicbdError):
    """Raised when a preprocessing transform fails, e.g. the JPEG codec"""
    pass


class SensitivityError(LicbdError):
    """Raised when the sensitivity estimate contains non-finite values"""
    pass


class CheckpointError(LicbdError):
    """Raised when a checkpoint cannot be read or does not match the requested kind"""
    pass


class ConfigError(LicbdError):
    """Raised for malformed or inconsistent experiment configuration"""
    pass


class DatasetError(LicbdError):
    """Raised when an image directory is missing or holds no decodable images"""
    pass
