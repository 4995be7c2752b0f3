class DictPFLError(Exception):
    """Base error for the simulator"""


class ShapeError(DictPFLError):
    """Operand dimensions do not line up"""


class ParameterError(DictPFLError):
    """A parameter is outside its allowed range"""


class NumericalError(DictPFLError):
    """A numerical routine failed to converge or produced non-finite values"""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class EncodingError(DictPFLError):
    """Values cannot be encoded into ciphertext slots"""


class IncompatibilityError(DictPFLError):
    """Ciphertexts were produced under different parameters or layouts"""


class ProtocolError(DictPFLError):
    """A federated round cannot proceed"""

    def __init__(self, message: str, client_id: int | None = None):
        super().__init__(message)
        self.client_id = client_id
