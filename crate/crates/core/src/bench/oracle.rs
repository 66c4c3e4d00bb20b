use super::registry::ConceptRegistry;
use crate::diffusion::ToyImage;
use crate::error::{Error, Result};

/// Prototype classifier: softmax over `−τ · mean squared pixel distance`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceOracle {
    names: Vec<String>,
    prototypes: Vec<ToyImage>,
    tau: f64,
}

impl ConfidenceOracle {
    pub const DEFAULT_TAU: f64 = 10.0;

    pub fn new(names: Vec<String>, prototypes: Vec<ToyImage>, tau: f64) -> Result<Self> {
        if names.is_empty() || names.len() != prototypes.len() || !(tau > 0.0) {
            return Err(Error::InvalidConfig("oracle needs one prototype per class and τ > 0".into()));
        }
        Ok(Self { names, prototypes, tau })
    }

    pub fn from_registry(registry: &ConceptRegistry) -> Self {
        let (names, protos) = registry.concepts().iter().map(|c| (c.name.clone(), c.prototype.clone())).unzip();
        Self::new(names, protos, Self::DEFAULT_TAU).expect("registry is non-empty")
    }

    pub fn classes(&self) -> &[String] {
        &self.names
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn index(&self, name: &str) -> Result<usize> {
        self.names.iter().position(|n| n == name).ok_or_else(|| Error::UnknownConcept(name.into()))
    }

    pub fn probabilities(&self, image: &ToyImage) -> Vec<f64> {
        let logits: Vec<f64> =
            self.prototypes.iter().map(|p| -self.tau * image.mean_sq_pixel_distance(p)).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }

    /// Index of the nearest prototype; ties go to the lower index.
    pub fn classify(&self, image: &ToyImage) -> usize {
        let d: Vec<f64> = self.prototypes.iter().map(|p| image.mean_sq_pixel_distance(p)).collect();
        (0..d.len()).fold(0, |best, i| if d[i] < d[best] { i } else { best })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prototypes_classify_as_themselves() {
        let r = ConceptRegistry::toy();
        let o = ConfidenceOracle::from_registry(&r);
        for c in r.concepts() {
            let p = o.probabilities(&c.prototype);
            assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            let argmax = (0..p.len()).fold(0, |b, i| if p[i] > p[b] { i } else { b });
            assert_eq!(argmax, c.id, "{}", c.name);
            assert_eq!(o.classify(&c.prototype), c.id);
        }
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(ConfidenceOracle::new(vec![], vec![], 10.0).is_err());
        let im = ToyImage::new(vec![0.0; crate::diffusion::IMAGE_LEN]).unwrap();
        assert!(ConfidenceOracle::new(vec!["a".into()], vec![im], 0.0).is_err());
    }
}
