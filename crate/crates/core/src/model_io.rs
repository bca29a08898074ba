//! Versioned binary model files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! bytes 0..4    magic "BLNM"
//! bytes 4..8    format version (u32, currently 1)
//! bytes 8..16   manifest length in bytes (u64)
//! manifest      JSON: model kind, layer manifest (kinds, bounds, widths),
//!               bias-net dims, and the ordered array directory
//! payload       the arrays from the directory, flat f64 little-endian,
//!               row-major, back to back
//! ```
//!
//! Free parameters are the canonical on-disk content; weights are
//! re-materialized on load, which reproduces them bit-exactly because
//! materialization is deterministic. A single materialized layer can also be
//! stored directly (kind `layer`).

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bilipnet::{BiLipModel, BiLipParams, ConditionedBiLipParams, Mlp, OrthFree};
use crate::monlip::{FreeParams, LayerWeights};
use crate::numerics::{Activation, Matrix};
use crate::plnet::PLNet;
use crate::solvers::SolverConfig;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"BLNM";
const VERSION: u32 = 1;

/// Everything the CLI trains, saves, and loads.
#[derive(Debug, Clone)]
pub enum ModelParams {
    BiLip(BiLipParams),
    Pl { g: BiLipParams, c: f64 },
    ConditionedPl { g: ConditionedBiLipParams, c: f64 },
    /// a single materialized monotone-Lipschitz layer
    Layer(LayerWeights),
}

impl ModelParams {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelParams::BiLip(_) => "bilipnet",
            ModelParams::Pl { .. } => "plnet",
            ModelParams::ConditionedPl { .. } => "conditioned-plnet",
            ModelParams::Layer(_) => "layer",
        }
    }

    /// The bi-Lipschitz core as a materialized model. For the conditioned
    /// kind this uses the base biases; weights (and hence certificates) do
    /// not depend on the condition.
    pub fn materialize_core(&self) -> Result<BiLipModel> {
        match self {
            ModelParams::BiLip(p) => p.materialize(),
            ModelParams::Pl { g, .. } => g.materialize(),
            ModelParams::ConditionedPl { g, .. } => g.base.materialize(),
            ModelParams::Layer(w) => Ok(BiLipModel {
                orth: vec![
                    crate::cayley::OrthogonalLayer::identity(w.input_dim),
                    crate::cayley::OrthogonalLayer::identity(w.input_dim),
                ],
                mono: vec![w.clone()],
            }),
        }
    }

    /// Potential network view, when the model has one.
    pub fn as_plnet(&self) -> Result<PLNet> {
        match self {
            ModelParams::Pl { g, c } => Ok(PLNet::new(g.materialize()?, *c)),
            ModelParams::ConditionedPl { g, c } => {
                Ok(PLNet::new(g.base.materialize()?, *c))
            }
            _ => Err(Error::Model(format!(
                "model kind `{}` has no potential head",
                self.kind()
            ))),
        }
    }

    /// Potential network for a fixed condition vector.
    pub fn as_plnet_for(&self, p: &[f64], _cfg: &SolverConfig) -> Result<PLNet> {
        match self {
            ModelParams::ConditionedPl { g, c } => Ok(PLNet::new(g.materialize_for(p)?, *c)),
            _ => self.as_plnet(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    kind: String,
    input_dim: usize,
    layers: Vec<LayerManifest>,
    #[serde(default)]
    bias_net: Option<MlpManifest>,
    /// training-data bounding box, when the model came out of an experiment
    #[serde(default)]
    domain: Option<Vec<(f64, f64)>>,
    arrays: Vec<ArrayManifest>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum LayerManifest {
    Orthogonal,
    Identity,
    Monlip {
        mu: f64,
        nu: f64,
        widths: Vec<usize>,
        activation: Activation,
        free_fp: bool,
    },
}

#[derive(Serialize, Deserialize)]
struct MlpManifest {
    dims: Vec<usize>,
    activation: Activation,
}

#[derive(Serialize, Deserialize)]
struct ArrayManifest {
    name: String,
    rows: usize,
    cols: usize,
}

fn collect_bilip(p: &BiLipParams, arrays: &mut Vec<(String, Matrix)>) -> Vec<LayerManifest> {
    let mut layers = Vec::new();
    for (i, mono) in p.mono.iter().enumerate() {
        layers.push(push_orth(&p.orth[i], i, arrays));
        layers.push(push_mono(mono, i, arrays));
    }
    layers.push(push_orth(&p.orth[p.mono.len()], p.mono.len(), arrays));
    layers
}

fn push_orth(
    o: &Option<OrthFree>,
    idx: usize,
    arrays: &mut Vec<(String, Matrix)>,
) -> LayerManifest {
    match o {
        Some(o) => {
            arrays.push((format!("orth{idx}.g"), o.g.clone()));
            arrays.push((format!("orth{idx}.q"), o.q.clone()));
            LayerManifest::Orthogonal
        }
        None => LayerManifest::Identity,
    }
}

fn push_mono(
    m: &FreeParams,
    idx: usize,
    arrays: &mut Vec<(String, Matrix)>,
) -> LayerManifest {
    if let Some(fp) = &m.fp {
        arrays.push((format!("mono{idx}.fp"), fp.clone()));
    }
    arrays.push((format!("mono{idx}.fq"), m.fq.clone()));
    for k in 0..m.layers() {
        arrays.push((format!("mono{idx}.d{k}"), m.d[k].clone()));
        arrays.push((format!("mono{idx}.fa{k}"), m.fa[k].clone()));
        if k >= 1 {
            arrays.push((format!("mono{idx}.fb{k}"), m.fb[k - 1].clone()));
        }
        arrays.push((format!("mono{idx}.b{k}"), m.b[k].clone()));
    }
    arrays.push((format!("mono{idx}.by"), m.b_y.clone()));
    LayerManifest::Monlip {
        mu: m.mu,
        nu: m.nu,
        widths: m.widths.clone(),
        activation: m.activation,
        free_fp: m.fp.is_some(),
    }
}

fn push_mlp(mlp: &Mlp, arrays: &mut Vec<(String, Matrix)>) -> MlpManifest {
    let mut dims = vec![mlp.input_dim()];
    for w in &mlp.weights {
        dims.push(w.rows());
    }
    for (i, w) in mlp.weights.iter().enumerate() {
        arrays.push((format!("bias_net.w{i}"), w.clone()));
    }
    for (i, b) in mlp.biases.iter().enumerate() {
        arrays.push((format!("bias_net.b{i}"), b.clone()));
    }
    MlpManifest {
        dims,
        activation: mlp.activation,
    }
}

/// A model plus the optional training-domain metadata stored next to it.
#[derive(Debug, Clone)]
pub struct SavedModel {
    pub params: ModelParams,
    pub domain: Option<Vec<(f64, f64)>>,
}

/// Serialize a model to the binary container.
pub fn save_model(path: &Path, params: &ModelParams, domain: Option<&[(f64, f64)]>) -> Result<()> {
    let mut arrays: Vec<(String, Matrix)> = Vec::new();
    let (input_dim, layers, bias_net) = match params {
        ModelParams::BiLip(p) => (p.input_dim, collect_bilip(p, &mut arrays), None),
        ModelParams::Pl { g, c } => {
            let layers = collect_bilip(g, &mut arrays);
            arrays.push(("c".into(), Matrix::scalar(*c)));
            (g.input_dim, layers, None)
        }
        ModelParams::ConditionedPl { g, c } => {
            let layers = collect_bilip(&g.base, &mut arrays);
            let mlp = push_mlp(&g.bias_net, &mut arrays);
            arrays.push(("c".into(), Matrix::scalar(*c)));
            (g.base.input_dim, layers, Some(mlp))
        }
        ModelParams::Layer(w) => {
            for (k, s) in w.s_blocks.iter().enumerate() {
                arrays.push((format!("layer.s{k}"), s.clone()));
            }
            for (k, v) in w.v_blocks.iter().enumerate() {
                arrays.push((format!("layer.v{}", k + 1), v.clone()));
            }
            for (k, p) in w.psi.iter().enumerate() {
                arrays.push((format!("layer.psi{k}"), p.clone()));
            }
            for (k, b) in w.bhat.iter().enumerate() {
                arrays.push((format!("layer.bhat{k}"), b.clone()));
            }
            arrays.push(("layer.by".into(), w.b_y.clone()));
            let layers = vec![LayerManifest::Monlip {
                mu: w.mu,
                nu: w.nu,
                widths: w.widths.clone(),
                activation: w.activation,
                free_fp: false,
            }];
            (w.input_dim, layers, None)
        }
    };

    let manifest = Manifest {
        kind: params.kind().to_string(),
        input_dim,
        layers,
        bias_net,
        domain: domain.map(|d| d.to_vec()),
        arrays: arrays
            .iter()
            .map(|(name, m)| ArrayManifest {
                name: name.clone(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_bytes);
    for (_, m) in &arrays {
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

struct ArrayReader {
    arrays: Vec<(String, Matrix)>,
    next: usize,
}

impl ArrayReader {
    fn take(&mut self, name: &str) -> Result<Matrix> {
        let (got, m) = self.arrays.get(self.next).ok_or_else(|| {
            Error::Model(format!("missing array `{name}` in model file"))
        })?;
        if got != name {
            return Err(Error::Model(format!(
                "array order mismatch: expected `{name}`, found `{got}`"
            )));
        }
        self.next += 1;
        Ok(m.clone())
    }

    fn done(&self) -> Result<()> {
        if self.next != self.arrays.len() {
            return Err(Error::Model(format!(
                "model file has {} unused arrays",
                self.arrays.len() - self.next
            )));
        }
        Ok(())
    }
}

/// Load a model from the binary container.
pub fn load_model(path: &Path) -> Result<SavedModel> {
    let (params, domain) = load_model_inner(path)?;
    Ok(SavedModel { params, domain })
}

fn load_model_inner(path: &Path) -> Result<(ModelParams, Option<Vec<(f64, f64)>>)> {
    let mut file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[0..4] != MAGIC {
        return Err(Error::Model("not a model file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Model(format!("unsupported format version {version}")));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + mlen {
        return Err(Error::Model("truncated manifest".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + mlen])?;

    let mut offset = 16 + mlen;
    let mut arrays = Vec::with_capacity(manifest.arrays.len());
    for am in &manifest.arrays {
        let len = am.rows * am.cols;
        let need = len * 8;
        if bytes.len() < offset + need {
            return Err(Error::Model(format!("truncated payload at `{}`", am.name)));
        }
        let mut data = Vec::with_capacity(len);
        for chunk in bytes[offset..offset + need].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        offset += need;
        arrays.push((am.name.clone(), Matrix::from_vec(am.rows, am.cols, data)));
    }
    if offset != bytes.len() {
        return Err(Error::Model("trailing bytes after payload".into()));
    }
    let mut reader = ArrayReader { arrays, next: 0 };

    let n = manifest.input_dim;
    match manifest.kind.as_str() {
        "bilipnet" | "plnet" | "conditioned-plnet" => {
            let mut orth = Vec::new();
            let mut mono = Vec::new();
            for lm in &manifest.layers {
                match lm {
                    LayerManifest::Orthogonal => {
                        let idx = orth.len();
                        let g = reader.take(&format!("orth{idx}.g"))?;
                        let q = reader.take(&format!("orth{idx}.q"))?;
                        orth.push(Some(OrthFree { g, q }));
                    }
                    LayerManifest::Identity => orth.push(None),
                    LayerManifest::Monlip {
                        mu,
                        nu,
                        widths,
                        activation,
                        free_fp,
                    } => {
                        let idx = mono.len();
                        let mut p = FreeParams::zeros(n, widths, *mu, *nu, *activation)?;
                        if *free_fp {
                            p.fp = Some(reader.take(&format!("mono{idx}.fp"))?);
                        }
                        p.fq = reader.take(&format!("mono{idx}.fq"))?;
                        for k in 0..widths.len() {
                            p.d[k] = reader.take(&format!("mono{idx}.d{k}"))?;
                            p.fa[k] = reader.take(&format!("mono{idx}.fa{k}"))?;
                            if k >= 1 {
                                p.fb[k - 1] = reader.take(&format!("mono{idx}.fb{k}"))?;
                            }
                            p.b[k] = reader.take(&format!("mono{idx}.b{k}"))?;
                        }
                        p.b_y = reader.take(&format!("mono{idx}.by"))?;
                        mono.push(p);
                    }
                }
            }
            if orth.len() != mono.len() + 1 {
                return Err(Error::Model("layer manifest is not an alternation".into()));
            }
            let base = BiLipParams {
                input_dim: n,
                mono,
                orth,
            };
            match manifest.kind.as_str() {
                "bilipnet" => {
                    reader.done()?;
                    Ok((ModelParams::BiLip(base), manifest.domain))
                }
                "plnet" => {
                    let c = reader.take("c")?.get(0, 0);
                    reader.done()?;
                    Ok((ModelParams::Pl { g: base, c }, manifest.domain))
                }
                _ => {
                    let mm = manifest
                        .bias_net
                        .as_ref()
                        .ok_or_else(|| Error::Model("conditioned model without bias net".into()))?;
                    let mut mlp = Mlp::zeros(&mm.dims, mm.activation)?;
                    for i in 0..mlp.weights.len() {
                        mlp.weights[i] = reader.take(&format!("bias_net.w{i}"))?;
                    }
                    for i in 0..mlp.biases.len() {
                        mlp.biases[i] = reader.take(&format!("bias_net.b{i}"))?;
                    }
                    let c = reader.take("c")?.get(0, 0);
                    reader.done()?;
                    let g = ConditionedBiLipParams::new(base, mlp)?;
                    Ok((ModelParams::ConditionedPl { g, c }, manifest.domain))
                }
            }
        }
        "layer" => {
            let Some(LayerManifest::Monlip {
                mu,
                nu,
                widths,
                activation,
                ..
            }) = manifest.layers.first()
            else {
                return Err(Error::Model("layer file without layer manifest".into()));
            };
            let l = widths.len();
            let mut s_blocks = Vec::with_capacity(l);
            for k in 0..l {
                s_blocks.push(reader.take(&format!("layer.s{k}"))?);
            }
            let mut v_blocks = Vec::with_capacity(l.saturating_sub(1));
            for k in 1..l {
                v_blocks.push(reader.take(&format!("layer.v{k}"))?);
            }
            let mut psi = Vec::with_capacity(l);
            for k in 0..l {
                psi.push(reader.take(&format!("layer.psi{k}"))?);
            }
            let mut bhat = Vec::with_capacity(l);
            for k in 0..l {
                bhat.push(reader.take(&format!("layer.bhat{k}"))?);
            }
            let b_y = reader.take("layer.by")?;
            reader.done()?;
            Ok((ModelParams::Layer(LayerWeights {
                input_dim: n,
                widths: widths.clone(),
                mu: *mu,
                nu: *nu,
                activation: *activation,
                s_blocks,
                v_blocks,
                psi,
                bhat,
                b_y,
            }), manifest.domain))
        }
        other => Err(Error::Model(format!("unknown model kind `{other}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Activation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn roundtrip(params: &ModelParams) -> ModelParams {
        let dir = std::env::temp_dir().join(format!(
            "bilip-model-io-{}-{}",
            std::process::id(),
            params.kind()
        ));
        save_model(&dir, params, Some(&[(-2.0, 2.0)])).unwrap();
        let back = load_model(&dir).unwrap();
        std::fs::remove_file(&dir).ok();
        assert_eq!(back.domain, Some(vec![(-2.0, 2.0)]));
        back.params
    }

    #[test]
    fn bilip_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = BiLipParams::init(3, 2, &[4, 5], 0.25, 4.0, Activation::Relu, true, false, &mut rng)
            .unwrap();
        let back = roundtrip(&ModelParams::BiLip(p.clone()));
        let ModelParams::BiLip(q) = back else {
            panic!("kind changed");
        };
        for (a, b) in p.flatten().iter().zip(q.flatten()) {
            assert_eq!(a.data(), b.data());
        }
        // materialization agrees bit-exactly as well
        let ma = p.materialize().unwrap();
        let mb = q.materialize().unwrap();
        let x = Matrix::col_vec(&[0.3, -0.7, 1.1]);
        assert_eq!(
            ma.forward(&x).unwrap().data(),
            mb.forward(&x).unwrap().data()
        );
    }

    #[test]
    fn plnet_and_conditioned_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base =
            BiLipParams::init(2, 1, &[4], 0.5, 2.0, Activation::Tanh, true, false, &mut rng)
                .unwrap();
        let back = roundtrip(&ModelParams::Pl {
            g: base.clone(),
            c: -0.375,
        });
        let ModelParams::Pl { c, .. } = back else {
            panic!("kind changed");
        };
        assert_eq!(c.to_bits(), (-0.375f64).to_bits());

        let dim = ConditionedBiLipParams::bias_dim(&base);
        let mlp = Mlp::init(&[2, 8, dim], Activation::Relu, &mut rng).unwrap();
        let cond = ConditionedBiLipParams::new(base, mlp).unwrap();
        let back = roundtrip(&ModelParams::ConditionedPl { g: cond.clone(), c: 1.5 });
        let ModelParams::ConditionedPl { g, .. } = back else {
            panic!("kind changed");
        };
        let a = cond.materialize_for(&[0.2, -0.4]).unwrap();
        let b = g.materialize_for(&[0.2, -0.4]).unwrap();
        let x = Matrix::col_vec(&[0.5, 0.5]);
        assert_eq!(a.forward(&x).unwrap().data(), b.forward(&x).unwrap().data());
    }

    #[test]
    fn layer_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = crate::monlip::FreeParams::init(
            3,
            &[4, 4],
            0.5,
            2.0,
            Activation::Relu,
            false,
            &mut rng,
        )
        .unwrap();
        let w = crate::monlip::materialize(&p).unwrap();
        let back = roundtrip(&ModelParams::Layer(w.clone()));
        let ModelParams::Layer(wb) = back else {
            panic!("kind changed");
        };
        let x = Matrix::col_vec(&[0.1, 0.2, 0.3]);
        assert_eq!(
            w.forward(&x).unwrap().data(),
            wb.forward(&x).unwrap().data()
        );
    }

    #[test]
    fn rejects_garbage() {
        let path = std::env::temp_dir().join(format!("bilip-model-io-bad-{}", std::process::id()));
        std::fs::write(&path, b"definitely not a model").unwrap();
        assert!(matches!(load_model(&path), Err(Error::Model(_))));
        std::fs::remove_file(&path).ok();
    }
}
