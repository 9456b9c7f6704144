"""Exception types. Every error carries a short machine-parsable ``code``."""


class IMCError(Exception):
    code = "E_GENERIC"

    def line(self):
        msg = " ".join(str(self).split())
        return f"{self.code}: {msg}"


class ShapeError(IMCError, ValueError):
    code = "E_SHAPE"


class ConfigError(IMCError, ValueError):
    code = "E_CONFIG"


class DatasetError(IMCError):
    code = "E_DATA"


class CheckpointError(IMCError):
    code = "E_CHECKPOINT"
