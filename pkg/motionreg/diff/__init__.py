from .tape import ParamTensor, Role, Tape, taped
