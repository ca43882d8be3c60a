"""Operation and activation codes shared by the compiled and pure-Python cores.

The integer values are part of the tape's internal contract: both cores and
any serialized diagnostics use the same codes.
"""

OP_CONST = 0
OP_ADD = 1
OP_SUB = 2
OP_MUL = 3
OP_DIV = 4
OP_EXP = 5
OP_LOG = 6
OP_NEG = 7
OP_MAX2 = 8
OP_RELU = 9
OP_TANH = 10

OP_NAMES = (
    "const",
    "add",
    "sub",
    "mul",
    "div",
    "exp",
    "log",
    "neg",
    "max2",
    "relu",
    "tanh",
)

OP_BY_NAME = {name: code for code, name in enumerate(OP_NAMES)}

# Number of parents per op code (const has none).
OP_ARITY = (0, 2, 2, 2, 2, 1, 1, 1, 2, 1, 1)

ACT_TANH = 0
ACT_RELU = 1

ACT_BY_NAME = {"tanh": ACT_TANH, "relu": ACT_RELU}
