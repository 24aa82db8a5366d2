//! Dense tensors, the differentiation tape, Adam, clipping and checkpoints.

mod checkpoint;
mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use gradcheck::{check_gradients, relative_error, CoordCheck, GradCheckReport, REL_ERR_FLOOR};
pub use optim::{AdamConfig, AdamState};
pub use params::{clip_global_norm, ParamSet};
pub use tape::{Pooling, Tape, Var};
pub use tensor::{log_sum_exp, softmax_rows, Scalar, Tensor};

pub(crate) use tape::lstm_forward;
