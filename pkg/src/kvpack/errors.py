"""Exception types raised across kvpack."""


class KvPackError(Exception):
    """Base class for all kvpack errors."""


class FingerprintMismatch(KvPackError):
    def __init__(self, expected: str, got: str):
        super().__init__(f"model fingerprint mismatch: expected {expected}, got {got}")
        self.expected = expected
        self.got = got


class PositionOverflow(KvPackError):
    def __init__(self, needed: int, limit: int):
        super().__init__(f"sequence needs {needed} positions but max_position is {limit}")
        self.needed = needed
        self.limit = limit


class UnknownRole(KvPackError, ValueError):
    def __init__(self, role: str):
        super().__init__(f"unknown role {role!r}; expected system, user or assistant")
        self.role = role


class UnknownDialect(KvPackError, KeyError):
    def __init__(self, dialect: str, known=()):
        msg = f"unknown template dialect {dialect!r}"
        if known:
            msg += f" (known: {', '.join(sorted(known))})"
        super().__init__(msg)
        self.dialect = dialect

    def __str__(self):
        return self.args[0]


class SteeringError(KvPackError, ValueError):
    pass


class FormatError(KvPackError):
    """A pack, delta or index stream could not be decoded."""


class BadMagic(FormatError):
    pass


class UnsupportedVersion(FormatError):
    pass


class TruncatedStream(FormatError):
    pass


class SizeMismatch(FormatError):
    pass
