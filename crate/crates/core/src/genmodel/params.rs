use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Matrix, NodeId, Tape};

/// Architecture and condition vocabulary of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_iota: usize,
    pub d_nu: usize,
    /// observed dimension (genes)
    pub p: usize,
    /// condition-embedding width
    pub d_u: usize,
    pub hidden: usize,
    /// last time index; time codes are t / T
    #[serde(rename = "T")]
    pub horizon: usize,
    pub conditions: Vec<String>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_iota", self.d_iota),
            ("d_nu", self.d_nu),
            ("p", self.p),
            ("d_u", self.d_u),
            ("hidden", self.hidden),
            ("T", self.horizon),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("model config `{name}` must be ≥ 1")));
            }
        }
        if self.conditions.is_empty() {
            return Err(Error::InvalidArgument("model config lists no conditions".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for c in &self.conditions {
            if !seen.insert(c) {
                return Err(Error::InvalidArgument(format!("duplicate condition id `{c}`")));
            }
        }
        Ok(())
    }

    pub fn d_latent(&self) -> usize {
        self.d_iota + self.d_nu
    }

    /// Position of a condition id in the embedding table.
    pub fn condition_index(&self, id: &str) -> Result<usize> {
        self.conditions
            .iter()
            .position(|c| c == id)
            .ok_or_else(|| Error::UnknownCondition(id.to_string()))
    }

    /// (name, rows, cols) of every parameter tensor, in flattening order.
    fn layout(&self) -> Vec<(String, usize, usize)> {
        let h = self.hidden;
        let mut out = Vec::new();
        let mut mlp = |prefix: &str, input: usize, output: usize| {
            for (i, (r, c)) in [(input, h), (h, h), (h, output)].into_iter().enumerate() {
                out.push((format!("{prefix}.w{}", i + 1), r, c));
                out.push((format!("{prefix}.b{}", i + 1), 1, c));
            }
        };
        let dn = self.d_nu;
        mlp("inv_enc", self.p, 2 * self.d_iota);
        mlp("resp_enc", self.p + self.d_u + 1, 2 * dn);
        mlp("dec", self.d_latent(), self.p);
        mlp("inv_trans", self.d_iota, 2 * self.d_iota);
        mlp("resp_trans", dn + self.d_iota + 2 * self.d_u, 2);
        out.push(("adj.base".into(), 1, dn * dn));
        out.push(("adj.mod".into(), self.d_u, dn * dn));
        out.push(("cond_emb".into(), self.conditions.len(), self.d_u));
        out.push(("target_emb".into(), dn, self.d_u));
        out
    }
}

/// Every learnable tensor of the model, kept in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Matrix<f64>>,
}

#[derive(Serialize, Deserialize)]
struct TensorFile {
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    config: ModelConfig,
    params: BTreeMap<String, TensorFile>,
}

/// Handles of one 2-hidden-layer network bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct MlpNodes {
    pub w: [NodeId; 3],
    pub b: [NodeId; 3],
}

/// All parameters of a model bound to a tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub inv_enc: MlpNodes,
    pub resp_enc: MlpNodes,
    pub dec: MlpNodes,
    pub inv_trans: MlpNodes,
    pub resp_trans: MlpNodes,
    pub adj_base: NodeId,
    pub adj_mod: NodeId,
    pub cond_emb: NodeId,
    pub target_emb: NodeId,
}

fn take_mlp(it: &mut impl Iterator<Item = NodeId>) -> MlpNodes {
    let mut next = || it.next().expect("layout covers every tensor");
    let (w1, b1, w2, b2, w3, b3) = (next(), next(), next(), next(), next(), next());
    MlpNodes {
        w: [w1, w2, w3],
        b: [b1, b2, b3],
    }
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases, small random embeddings.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, r, c) in config.layout() {
            let m = if name.contains(".b") || name == "adj.base" {
                Matrix::zeros(r, c)
            } else if name.ends_with("_emb") {
                let data = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
                Matrix::from_vec(r, c, data)?
            } else {
                let bound = (6.0 / (r + c) as f64).sqrt();
                let data = (0..r * c).map(|_| rng.random_range(-bound..bound)).collect();
                Matrix::from_vec(r, c, data)?
            };
            names.push(name);
            tensors.push(m);
        }
        Ok(ModelParams {
            config,
            names,
            tensors,
        })
    }

    /// All-zero parameters (every network outputs its zero bias).
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let mut p = Self::init(config, 0)?;
        p.tensors.iter_mut().for_each(|t| t.as_mut_slice().fill(0.0));
        Ok(p)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&Matrix<f64>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix<f64>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.tensors[i])
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    /// Flat range of each named tensor inside [`ModelParams::flatten`].
    pub fn offsets(&self) -> Vec<(String, std::ops::Range<usize>)> {
        let mut start = 0;
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| {
                let r = start..start + t.len();
                start = r.end;
                (n.clone(), r)
            })
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in &self.tensors {
            out.extend_from_slice(t.as_slice());
        }
        out
    }

    pub fn assign(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Dimension(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut start = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.as_mut_slice().copy_from_slice(&flat[start..start + n]);
            start += n;
        }
        Ok(())
    }

    /// Registers the parameters on `tape`: as differentiable leaves (gradient
    /// layout = [`ModelParams::flatten`]) or as constants.
    pub fn bind(&self, tape: &mut Tape<f64>, differentiable: bool) -> Result<BoundParams> {
        let mut ids = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            ids.push(if differentiable {
                tape.input(t.clone())?
            } else {
                tape.constant(t.clone())?
            });
        }
        let mut it = ids.into_iter();
        let inv_enc = take_mlp(&mut it);
        let resp_enc = take_mlp(&mut it);
        let dec = take_mlp(&mut it);
        let inv_trans = take_mlp(&mut it);
        let resp_trans = take_mlp(&mut it);
        Ok(BoundParams {
            inv_enc,
            resp_enc,
            dec,
            inv_trans,
            resp_trans,
            adj_base: it.next().unwrap(),
            adj_mod: it.next().unwrap(),
            cond_emb: it.next().unwrap(),
            target_emb: it.next().unwrap(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            config: self.config.clone(),
            params: self
                .names
                .iter()
                .zip(&self.tensors)
                .map(|(n, t)| {
                    (
                        n.clone(),
                        TensorFile {
                            shape: [t.rows(), t.cols()],
                            data: t.as_slice().to_vec(),
                        },
                    )
                })
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut file: ModelFile = serde_json::from_str(text)?;
        file.config.validate()?;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, r, c) in file.config.layout() {
            let t = file
                .params
                .remove(&name)
                .ok_or_else(|| Error::InvalidArgument(format!("model file lacks `{name}`")))?;
            if t.shape != [r, c] {
                return Err(Error::Dimension(format!(
                    "`{name}` has shape {:?}, config implies [{r}, {c}]",
                    t.shape
                )));
            }
            let m = Matrix::from_vec(r, c, t.data)?;
            if !m.is_finite() {
                return Err(Error::InvalidArgument(format!("`{name}` has non-finite entries")));
            }
            names.push(name);
            tensors.push(m);
        }
        if let Some(extra) = file.params.keys().next() {
            return Err(Error::InvalidArgument(format!("unexpected tensor `{extra}`")));
        }
        Ok(ModelParams {
            config: file.config,
            names,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
