"""Exception hierarchy shared by every layer of the package."""


class IaxKadError(Exception):
    pass


class ConfigError(IaxKadError, ValueError):
    """Parameters or scenario contents are out of bounds."""


class AddressError(IaxKadError, ValueError):
    """A user address such as ``alice@example.org`` is malformed."""


class SelfContactError(IaxKadError, ValueError):
    """A node tried to store or index itself."""


class FrameError(IaxKadError):
    """Base class for codec failures."""


class EncodeError(FrameError):
    pass


class TruncatedHeaderError(FrameError):
    pass


class UnknownKindError(FrameError):
    pass


class IEOverrunError(FrameError):
    pass


class CallNumberExhausted(IaxKadError):
    pass


class CallStateError(IaxKadError):
    pass
