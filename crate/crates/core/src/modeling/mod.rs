//! Masked token modeling over codebook index maps, guided by a frozen
//! semantic teacher.
//!
//! The token encoder turns (index, position) pairs into a sequence headed by
//! a learnable class token. During pretraining a random subset of positions
//! is hidden; the encoder sees only the rest, masked slots are filled with
//! the encoded class token and a shallow decoder predicts the hidden
//! indices. The encoded class token is additionally projected into the
//! teacher's embedding space and pulled towards the teacher's image
//! embedding (MSE) and label embedding (InfoNCE).

mod encoder;
mod losses;
mod mask;
mod teacher;

pub use encoder::{
    fill_masked, fill_masked_graph, EncoderOutput, Projection, ReconDecoder, TokenEncoder,
    TokenEncoderConfig, TokenSeq, DECODER, ENCODER, PROJECTION,
};
pub use losses::{
    loss_contra, loss_dist, loss_rec, pretrain_loss, pretrain_step, PretrainBatch,
    PretrainLosses, PretrainWeights, TokenModel,
};
pub use mask::{sample_mask, MaskSpec};
pub use teacher::{
    read_embedding_file, write_embedding_file, FileTeacher, SemanticTeacher, ToyTeacher,
};
