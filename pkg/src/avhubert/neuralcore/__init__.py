from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .optim import AdamState, LRSchedule, adam_step, lr_at
from .tensor import (
    ShapeError,
    Tensor,
    add,
    concat,
    custom,
    depthwise_conv1d,
    dot,
    dropout,
    embedding,
    gather,
    gelu,
    get_dtype,
    layer_norm,
    log_softmax,
    matmul,
    mean,
    mul,
    neg,
    nll_from_log_softmax,
    no_grad,
    precision,
    relu,
    reshape,
    scale,
    set_precision,
    softmax,
    sum_,
    transpose,
    where,
)
