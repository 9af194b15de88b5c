//! Asymmetric multi-modal transformation (AMMT) and its ablation variants.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Which representations receive an identity-initialized affine map before
/// concatenation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    Concat,
    Symmetric,
    LinearOnV,
    LinearOnS,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(FusionMode::Concat),
            "symmetric" => Ok(FusionMode::Symmetric),
            "linear-on-v" => Ok(FusionMode::LinearOnV),
            "linear-on-s" => Ok(FusionMode::LinearOnS),
            other => Err(Error::Config(format!("unknown fusion mode `{other}`"))),
        }
    }
}

impl FusionMode {
    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Concat => "concat",
            FusionMode::Symmetric => "symmetric",
            FusionMode::LinearOnV => "linear-on-v",
            FusionMode::LinearOnS => "linear-on-s",
        }
    }

    fn on_v(self) -> bool {
        matches!(self, FusionMode::Symmetric | FusionMode::LinearOnV)
    }

    fn on_s(self) -> bool {
        matches!(self, FusionMode::Symmetric | FusionMode::LinearOnS)
    }
}

/// Square affine map `W x + b`, created as the identity.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Affine {
    pub w: ParamId,
    pub b: ParamId,
}

impl Affine {
    pub fn identity(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Affine {
            w: store.add(format!("{name}.w"), Tensor::identity(dim)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[dim])),
        }
    }

    pub fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let wx = tape.matmul(p[self.w], x)?;
        tape.add(wx, p[self.b])
    }
}

/// The representation triple handed to the decoder.
#[derive(Debug, Clone, Copy)]
pub struct EncodedRepresentations {
    pub h_v: Var,
    pub h_s: Var,
    pub h_vs: Var,
}

impl EncodedRepresentations {
    pub fn get(&self, m: crate::decoder::Modality) -> Var {
        use crate::decoder::Modality;
        match m {
            Modality::V => self.h_v,
            Modality::S => self.h_s,
            Modality::VS => self.h_vs,
        }
    }
}

/// Fusion stage: `h_vs = f_v(h_v) ⊕ f_s(h_s)` with `f_*` identity or affine.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Ammt {
    pub mode: FusionMode,
    h_v: usize,
    h_s: usize,
    on_v: Option<Affine>,
    on_s: Option<Affine>,
}

impl Ammt {
    pub fn new(store: &mut ParamStore, mode: FusionMode, h_v: usize, h_s: usize) -> Self {
        Ammt {
            mode,
            h_v,
            h_s,
            on_v: mode.on_v().then(|| Affine::identity(store, "ammt.v", h_v)),
            on_s: mode.on_s().then(|| Affine::identity(store, "ammt.s", h_s)),
        }
    }

    /// `h_v` and `h_s` pass through unchanged alongside the fused vector.
    pub fn fuse(&self, tape: &mut Tape, p: &Bound, h_v: Var, h_s: Var) -> Result<EncodedRepresentations> {
        if tape.shape(h_v) != [self.h_v] || tape.shape(h_s) != [self.h_s] {
            return Err(Error::dim("ammt_fuse", tape.shape(h_v), tape.shape(h_s)));
        }
        let left = match &self.on_v {
            Some(a) => a.apply(tape, p, h_v)?,
            None => h_v,
        };
        let right = match &self.on_s {
            Some(a) => a.apply(tape, p, h_s)?,
            None => h_s,
        };
        let h_vs = tape.concat(&[left, right])?;
        Ok(EncodedRepresentations { h_v, h_s, h_vs })
    }

    pub fn sensor_affine(&self) -> Option<Affine> {
        self.on_s
    }

    pub fn visual_affine(&self) -> Option<Affine> {
        self.on_v
    }
}
