//! Parameter and communication bookkeeping for reference architectures.
//!
//! Conv counts are stored as printed for the reference CNN: they include one
//! bias per output channel (`5*5*3*64 + 64 = 4864`), while fully-connected
//! counts are bias-free (`in * out`).

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LayerKind {
    Conv,
    Fc,
    Pool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerDesc {
    pub name: String,
    pub kind: LayerKind,
    pub shape: Vec<usize>,
    pub params: u64,
}

impl LayerDesc {
    fn conv(name: &str, k: usize, c_in: usize, c_out: usize) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Conv,
            shape: vec![k, k, c_in, c_out],
            params: (k * k * c_in * c_out + c_out) as u64,
        }
    }

    fn fc(name: &str, inputs: usize, outputs: usize) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Fc,
            shape: vec![inputs, outputs],
            params: (inputs * outputs) as u64,
        }
    }

    fn pool(name: &str, k: usize) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Pool,
            shape: vec![k, k],
            params: 0,
        }
    }
}

/// Input variants of the reference CNN.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CnnVariant {
    Cifar10,
    Cifar100,
    FashionMnist,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ArchSpec {
    pub name: String,
    pub layers: Vec<LayerDesc>,
}

impl ArchSpec {
    pub fn new(name: impl Into<String>, layers: Vec<LayerDesc>) -> Result<Self> {
        let spec = Self {
            name: name.into(),
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if !self.layers.iter().any(|l| l.params > 0) {
            return Err(Error::invalid("architecture has no parameterized layer"));
        }
        for l in &self.layers {
            let expect = match (l.kind, l.shape.as_slice()) {
                (LayerKind::Fc, [i, o]) => Some((i * o) as u64),
                (LayerKind::Conv, [k1, k2, ci, co]) => Some((k1 * k2 * ci * co + co) as u64),
                (LayerKind::Pool, _) => Some(0),
                _ => None,
            };
            if expect != Some(l.params) {
                return Err(Error::invalid(format!(
                    "layer {} has inconsistent shape and count",
                    l.name
                )));
            }
        }
        let mut names: Vec<&str> = self.layers.iter().map(|l| l.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("layer names must be unique"));
        }
        Ok(())
    }

    /// Two 5x5x64 conv layers with 2x2 pooling, then 1600x1024, 1024x1024 and
    /// 1024xclasses fully-connected layers.
    pub fn cifar_cnn(variant: CnnVariant) -> Self {
        let (channels, classes, name) = match variant {
            CnnVariant::Cifar10 => (3, 10, "cifar10_cnn"),
            CnnVariant::Cifar100 => (3, 100, "cifar100_cnn"),
            CnnVariant::FashionMnist => (1, 10, "fmnist_cnn"),
        };
        Self {
            name: name.into(),
            layers: vec![
                LayerDesc::conv("conv1", 5, channels, 64),
                LayerDesc::pool("pool1", 2),
                LayerDesc::conv("conv2", 5, 64, 64),
                LayerDesc::pool("pool2", 2),
                LayerDesc::fc("fc1", 1600, 1024),
                LayerDesc::fc("fc2", 1024, 1024),
                LayerDesc::fc("fc3", 1024, classes),
            ],
        }
    }

    pub fn emnistl_mlp() -> Self {
        Self {
            name: "emnistl_mlp".into(),
            layers: vec![
                LayerDesc::fc("fc1", 784, 1024),
                LayerDesc::fc("fc2", 1024, 1024),
                LayerDesc::fc("fc3", 1024, 1024),
                LayerDesc::fc("fc4", 1024, 10),
            ],
        }
    }

    /// Bias-free MLP through the given widths, e.g. `[16, 32, 32, 10]`.
    pub fn desk_mlp(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::invalid("need at least two positive widths"));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(k, w)| LayerDesc::fc(&format!("fc{}", k + 1), w[0], w[1]))
            .collect();
        Self::new("desk_mlp", layers)
    }

    /// Looks up a preset by name.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "cifar_cnn" | "cifar10_cnn" => Ok(Self::cifar_cnn(CnnVariant::Cifar10)),
            "cifar100_cnn" => Ok(Self::cifar_cnn(CnnVariant::Cifar100)),
            "fmnist_cnn" => Ok(Self::cifar_cnn(CnnVariant::FashionMnist)),
            "emnistl_mlp" => Ok(Self::emnistl_mlp()),
            "desk_mlp" => Self::desk_mlp(&[16, 32, 32, 10]),
            other => Err(Error::invalid(format!("unknown architecture preset `{other}`"))),
        }
    }

    /// Layers that carry parameters, in order.
    pub fn trainable(&self) -> impl Iterator<Item = &LayerDesc> {
        self.layers.iter().filter(|l| l.params > 0)
    }

    pub fn final_layer(&self) -> &LayerDesc {
        self.trainable()
            .last()
            .expect("validated: at least one parameterized layer")
    }

    pub fn total_params(&self) -> u64 {
        self.layers.iter().map(|l| l.params).sum()
    }

    fn layer(&self, name: &str) -> Result<&LayerDesc> {
        self.layers
            .iter()
            .find(|l| l.name == name)
            .ok_or_else(|| Error::invalid(format!("unknown layer `{name}` in {}", self.name)))
    }
}

/// Per-layer counts of the parameterized layers.
pub fn param_counts(arch: &ArchSpec) -> Vec<(String, u64)> {
    arch.trainable().map(|l| (l.name.clone(), l.params)).collect()
}

fn check_trained<'a>(arch: &'a ArchSpec, trained: &[&str]) -> Result<Vec<&'a LayerDesc>> {
    let layers = trained.iter().map(|n| arch.layer(n)).collect::<Result<Vec<_>>>()?;
    if !trained.contains(&arch.final_layer().name.as_str()) {
        return Err(Error::invalid(format!(
            "trained set must include the output layer {}",
            arch.final_layer().name
        )));
    }
    Ok(layers)
}

/// Expected deployed model size when untrained layers are pruned to keep ratio `p`.
pub fn deployed_size(arch: &ArchSpec, trained: &[&str], p: f64) -> Result<f64> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::invalid(format!("keep ratio must lie in (0, 1], got {p}")));
    }
    check_trained(arch, trained)?;
    Ok(arch
        .layers
        .iter()
        .map(|l| {
            if trained.contains(&l.name.as_str()) {
                l.params as f64
            } else {
                p * l.params as f64
            }
        })
        .sum())
}

/// Scalars uploaded per round by a client training `trained`.
pub fn upload_cost(arch: &ArchSpec, trained: &[&str]) -> Result<u64> {
    let mut layers = check_trained(arch, trained)?;
    layers.dedup_by(|a, b| a.name == b.name);
    Ok(layers.iter().map(|l| l.params).sum())
}

/// `(max - min) / min`.
pub fn relative_spread(costs: &[f64]) -> Result<f64> {
    if costs.is_empty() {
        return Err(Error::invalid("no costs given"));
    }
    let min = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let max = costs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if min <= 0.0 {
        return Err(Error::UndefinedSpread);
    }
    Ok((max - min) / min)
}

/// A client training one non-output layer plus the output layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SingleLayerVariant {
    pub layer: String,
    pub upload: u64,
    pub deployed: f64,
}

pub fn single_layer_variants(arch: &ArchSpec, p: f64) -> Result<Vec<SingleLayerVariant>> {
    let fin = arch.final_layer().name.clone();
    arch.trainable()
        .filter(|l| l.name != fin)
        .map(|l| {
            let set = [l.name.as_str(), fin.as_str()];
            Ok(SingleLayerVariant {
                layer: l.name.clone(),
                upload: upload_cost(arch, &set)?,
                deployed: deployed_size(arch, &set, p)?,
            })
        })
        .collect()
}

/// Per-round upload of a scheme training `k` chosen layers plus the output
/// layer, relative to training everything.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SchemeFraction {
    /// `(k + 1) / #layers`: the share of layers each client uploads.
    pub layer_fraction: f64,
    /// Expected share of parameters when the `k` layers are uniform among the non-output layers.
    pub param_fraction: f64,
}

pub fn scheme_upload_fraction(arch: &ArchSpec, k: usize) -> Result<SchemeFraction> {
    let layers: Vec<&LayerDesc> = arch.trainable().collect();
    let others = layers.len() - 1;
    if k > others {
        return Err(Error::invalid(format!(
            "cannot choose {k} of {others} non-output layers"
        )));
    }
    let total = arch.total_params() as f64;
    let fin = arch.final_layer().params as f64;
    let rest = total - fin;
    let param_fraction = if others == 0 {
        1.0
    } else {
        (fin + rest * k as f64 / others as f64) / total
    };
    Ok(SchemeFraction {
        layer_fraction: (k + 1) as f64 / layers.len() as f64,
        param_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_counts() {
        let a = ArchSpec::desk_mlp(&[16, 32, 32, 10]).unwrap();
        assert_eq!(
            param_counts(&a),
            vec![("fc1".into(), 512), ("fc2".into(), 1024), ("fc3".into(), 320)]
        );
    }

    #[test]
    fn spread_cases() {
        assert_eq!(relative_spread(&[3.0, 3.0]).unwrap(), 0.0);
        assert_eq!(relative_spread(&[0.0, 1.0]), Err(Error::UndefinedSpread));
        assert!(relative_spread(&[]).is_err());
    }

    #[test]
    fn deployed_full_keep_is_total() {
        let a = ArchSpec::cifar_cnn(CnnVariant::Cifar10);
        assert_eq!(deployed_size(&a, &["fc3"], 1.0).unwrap(), a.total_params() as f64);
        assert!(deployed_size(&a, &["conv1"], 0.5).is_err());
        assert!(deployed_size(&a, &["fc9", "fc3"], 0.5).is_err());
    }

    #[test]
    fn bad_custom_spec() {
        let mut l = LayerDesc::fc("a", 2, 3);
        l.params = 7;
        assert!(ArchSpec::new("x", vec![l]).is_err());
        assert!(ArchSpec::preset("nope").is_err());
    }
}
