//! Attention mathematics: the quadratic scaled dot-product reference, the
//! linear-complexity factorized kernel, the explicit relative-attention
//! oracle, and the convolutional position encodings, plus the assembled
//! multi-head conv-attentional module.

mod kernels;
mod module;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use kernels::{
    cpe, crpe, factor_attention_into, factorized_attention, full_attention_into,
    rel_factor_att_oracle, rel_position_term_oracle, scaled_dot_product_attention,
};
pub use module::{
    attention_core, conv_attention_apply, conv_attention_module, cpe_seq, crpe_core,
    default_window_split, factor_heads, matrix_to_seq, project_qkv, seq_to_matrix,
    AttentionParams, ConvAttConfig, PosEncParams, SeqVar, INIT_STD, LAYER_NORM_EPS,
};

/// A class token plus an HxWxC grid of image tokens; the sequence length
/// is H*W plus one when the class token is present.
#[derive(Debug, Clone)]
pub struct TokenSeq<T: Scalar> {
    pub cls: Option<Tensor<T>>,
    pub img: Tensor<T>,
}

impl<T: Scalar> TokenSeq<T> {
    pub fn new(cls: Option<Tensor<T>>, img: Tensor<T>) -> Result<Self> {
        let (_, _, c) = img.dims3("token_seq")?;
        if let Some(cls) = &cls {
            if cls.shape() != [c] {
                return Err(Error::dimension(
                    "token_seq",
                    format!("cls {:?} does not match channels {}", cls.shape(), c),
                ));
            }
        }
        Ok(TokenSeq { cls, img })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.img.shape()[0], self.img.shape()[1])
    }

    pub fn channels(&self) -> usize {
        self.img.shape()[2]
    }

    pub fn n_tokens(&self) -> usize {
        let (h, w) = self.grid();
        h * w + usize::from(self.cls.is_some())
    }

    /// Flatten to an NxC token matrix, class token first.
    pub fn to_matrix(&self) -> Result<Tensor<T>> {
        let (h, w) = self.grid();
        let c = self.channels();
        let img = self.img.reshape(&[h * w, c])?;
        match &self.cls {
            Some(cls) => {
                let row = cls.reshape(&[1, c])?;
                Tensor::concat(&[&row, &img], 0)
            }
            None => Ok(img),
        }
    }

    /// Rebuild from an NxC matrix produced by [`to_matrix`].
    pub fn from_matrix(mat: &Tensor<T>, h: usize, w: usize, has_cls: bool) -> Result<Self> {
        let (n, c) = mat.dims2("token_seq")?;
        let expected = h * w + usize::from(has_cls);
        if n != expected {
            return Err(Error::dimension(
                "token_seq",
                format!("matrix rows {} != {}x{} grid with cls={}", n, h, w, has_cls),
            ));
        }
        if has_cls {
            let cls = mat.slice_axis(0, 0, 1)?.reshape(&[c])?;
            let img = mat.slice_axis(0, 1, h * w)?.reshape(&[h, w, c])?;
            TokenSeq::new(Some(cls), img)
        } else {
            TokenSeq::new(None, mat.reshape(&[h, w, c])?)
        }
    }
}
