use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Named parameter arrays in a fixed registration order. Flattened views
/// (gradients, update directions) follow this order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<Param>,
}

/// Index of a parameter within its [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    /// Uniform on `±1/sqrt(fan_in)`.
    Uniform {
        fan_in: usize,
    },
    Zeros,
    Ones,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn add(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Uniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            }
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
        };
        self.entries.push(Param {
            name: name.into(),
            shape: shape.to_vec(),
            data,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn entries(&self) -> &[Param] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.iter_mut().find(|p| p.name == name)
    }

    pub fn by_id(&self, id: ParamId) -> &Param {
        &self.entries[id.0]
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|p| p.data.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.count());
        for p in &self.entries {
            out.extend_from_slice(&p.data);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.count() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.count()
            )));
        }
        let mut off = 0;
        for p in &mut self.entries {
            let n = p.data.len();
            p.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Replaces every array with checkpointed values after checking that
    /// names and shapes agree with this layout.
    pub fn load_from(&mut self, other: &[Param]) -> Result<()> {
        if other.len() != self.entries.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} arrays, network has {}",
                other.len(),
                self.entries.len()
            )));
        }
        for (mine, theirs) in self.entries.iter().zip(other) {
            if mine.name != theirs.name || mine.shape != theirs.shape {
                return Err(Error::Config(format!(
                    "checkpoint array {} {:?} does not match network array {} {:?}",
                    theirs.name, theirs.shape, mine.name, mine.shape
                )));
            }
        }
        for (mine, theirs) in self.entries.iter_mut().zip(other) {
            mine.data.copy_from_slice(&theirs.data);
        }
        Ok(())
    }

    /// Registers every parameter as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Result<Vec<Var>> {
        self.entries
            .iter()
            .map(|p| g.param(p.data.clone(), &p.shape))
            .collect()
    }

    /// Flattens the gradients of bound leaves; unreached leaves get zeros.
    pub fn gather_grads(&self, grads: &Gradients, vars: &[Var]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.count());
        for (p, v) in self.entries.iter().zip(vars) {
            match grads.get(*v) {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat_n(0.0, p.data.len())),
            }
        }
        out
    }
}
