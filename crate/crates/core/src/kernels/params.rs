use std::fmt;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::query::OpKind;
use crate::scalar::{softplus, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    #[default]
    Gqe,
    Q2b,
    #[serde(rename = "betae")]
    BetaE,
}

impl Backbone {
    pub const ALL: [Backbone; 3] = [Backbone::Gqe, Backbone::Q2b, Backbone::BetaE];

    pub fn tag(self) -> &'static str {
        match self {
            Backbone::Gqe => "gqe",
            Backbone::Q2b => "q2b",
            Backbone::BetaE => "betae",
        }
    }
}

impl Backbone {
    /// Whether this backbone's backward kernel for `kind` reads the forward inputs.
    pub fn backward_reads_inputs(self, kind: OpKind) -> bool {
        !matches!((self, kind), (Backbone::Gqe, OpKind::Project | OpKind::Negate) | (Backbone::Q2b, OpKind::Negate))
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl std::str::FromStr for Backbone {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "gqe" => Ok(Backbone::Gqe),
            "q2b" => Ok(Backbone::Q2b),
            "betae" | "beta" => Ok(Backbone::BetaE),
            other => Err(format!("unknown backbone `{other}` (expected gqe, q2b or betae)")),
        }
    }
}

/// Parameter tensor slots. Meaning of `W1..W4` depends on the backbone:
///
/// | backbone | W1, W2 | W3, W4 |
/// |---|---|---|
/// | GQE | intersect MLP | unused |
/// | Q2B | attention MLP | offset DeepSets MLP |
/// | BetaE | projection MLP | attention MLP |
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Param {
    Entity,
    Relation,
    RelationOffset,
    W1,
    W2,
    W3,
    W4,
    FuseF,
    FuseW,
    FuseB,
    FusePsi,
}

impl Param {
    pub const ALL: [Param; 11] = [
        Param::Entity,
        Param::Relation,
        Param::RelationOffset,
        Param::W1,
        Param::W2,
        Param::W3,
        Param::W4,
        Param::FuseF,
        Param::FuseW,
        Param::FuseB,
        Param::FusePsi,
    ];

    pub fn name(self, backbone: Backbone) -> &'static str {
        use Backbone::*;
        match (self, backbone) {
            (Param::Entity, Q2b) => "entity_center",
            (Param::Entity, _) => "entity",
            (Param::Relation, Q2b) => "relation_center",
            (Param::Relation, _) => "relation",
            (Param::RelationOffset, _) => "relation_offset",
            (Param::W1, Gqe) => "intersect.w1",
            (Param::W2, Gqe) => "intersect.w2",
            (Param::W1, Q2b) => "attention.w1",
            (Param::W2, Q2b) => "attention.w2",
            (Param::W3, Q2b) => "offset.w1",
            (Param::W4, Q2b) => "offset.w2",
            (Param::W1, BetaE) => "project.w1",
            (Param::W2, BetaE) => "project.w2",
            (Param::W3, BetaE) => "attention.w1",
            (Param::W4, BetaE) => "attention.w2",
            (Param::W3 | Param::W4, Gqe) => "unused",
            (Param::FuseF, _) => "fusion.f",
            (Param::FuseW, _) => "fusion.w",
            (Param::FuseB, _) => "fusion.b",
            (Param::FusePsi, _) => "fusion.psi",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub n_entities: usize,
    pub n_relations: usize,
    /// Embedding width `d` (BetaE: `d'`, each of α and β).
    pub dim: usize,
    /// Hidden width of the BetaE MLPs.
    pub hidden: usize,
    /// Semantic store width when fusion is enabled.
    pub sem_dim: Option<usize>,
}

/// Backbone parameter tables plus optional fusion weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub backbone: Backbone,
    pub dims: ModelDims,
    tensors: Vec<Option<Array2<T>>>,
}

fn uniform<T: Scalar, R: Rng + ?Sized>(shape: (usize, usize), lo: f64, hi: f64, rng: &mut R) -> Array2<T> {
    Array2::from_shape_simple_fn(shape, || T::lit(rng.random_range(lo..hi)))
}

fn xavier<T: Scalar, R: Rng + ?Sized>(out: usize, inp: usize, rng: &mut R) -> Array2<T> {
    let a = (6.0 / (out + inp) as f64).sqrt();
    uniform((out, inp), -a, a, rng)
}

impl<T: Scalar> ModelParams<T> {
    /// Tensor shapes for a backbone, in `Param` order.
    pub fn shapes(backbone: Backbone, dims: &ModelDims) -> Vec<(Param, (usize, usize))> {
        let ModelDims { n_entities: ne, n_relations: nr, dim: d, hidden: h, sem_dim } = *dims;
        let mut s = match backbone {
            Backbone::Gqe => vec![
                (Param::Entity, (ne, d)),
                (Param::Relation, (nr, d)),
                (Param::W1, (d, d)),
                (Param::W2, (d, d)),
            ],
            Backbone::Q2b => vec![
                (Param::Entity, (ne, d)),
                (Param::Relation, (nr, d)),
                (Param::RelationOffset, (nr, d)),
                (Param::W1, (d, d)),
                (Param::W2, (d, d)),
                (Param::W3, (d, d)),
                (Param::W4, (d, d)),
            ],
            Backbone::BetaE => vec![
                (Param::Entity, (ne, 2 * d)),
                (Param::Relation, (nr, d)),
                (Param::W1, (h, 3 * d)),
                (Param::W2, (2 * d, h)),
                (Param::W3, (h, 2 * d)),
                (Param::W4, (2 * d, h)),
            ],
        };
        if let Some(dl) = sem_dim {
            let sw = s[0].1 .1;
            s.push((Param::FuseF, (d, dl)));
            s.push((Param::FuseW, (d, sw + d)));
            s.push((Param::FuseB, (1, d)));
            if backbone == Backbone::BetaE {
                s.push((Param::FusePsi, (2 * d, d)));
            }
        }
        s
    }

    pub fn zeros(backbone: Backbone, dims: ModelDims) -> Self {
        let mut tensors = vec![None; Param::ALL.len()];
        for (p, shape) in Self::shapes(backbone, &dims) {
            tensors[p as usize] = Some(Array2::zeros(shape));
        }
        ModelParams { backbone, dims, tensors }
    }

    /// Random initialisation. Embeddings are uniform in `±(γ + 2) / d`.
    pub fn init<R: Rng + ?Sized>(backbone: Backbone, dims: ModelDims, gamma: f64, rng: &mut R) -> Self {
        let range = (gamma + 2.0) / dims.dim as f64;
        let mut out = Self::zeros(backbone, dims);
        for (p, (r, c)) in Self::shapes(backbone, &dims) {
            let t = match p {
                Param::Entity | Param::Relation => uniform((r, c), -range, range, rng),
                // softplus(offset) starts near `range`
                Param::RelationOffset => {
                    let base = range.exp_m1().ln();
                    uniform((r, c), base - 0.1, base + 0.1, rng)
                }
                Param::FuseB => Array2::zeros((r, c)),
                _ => xavier(r, c, rng),
            };
            out.tensors[p as usize] = Some(t);
        }
        out
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            backbone: self.backbone,
            dims: self.dims,
            tensors: self.tensors.iter().map(|t| t.as_ref().map(|a| Array2::zeros(a.dim()))).collect(),
        }
    }

    /// Mutable access to several distinct tensors at once.
    pub fn disjoint_mut<const N: usize>(&mut self, ps: [Param; N]) -> [&mut Array2<T>; N] {
        let b = self.backbone;
        self.tensors
            .get_disjoint_mut(ps.map(|p| p as usize))
            .expect("distinct parameters")
            .map(|t| t.as_mut().unwrap_or_else(|| panic!("{b} lacks a requested tensor")))
    }

    pub fn has(&self, p: Param) -> bool {
        self.tensors[p as usize].is_some()
    }

    pub fn get(&self, p: Param) -> &Array2<T> {
        self.tensors[p as usize]
            .as_ref()
            .unwrap_or_else(|| panic!("{} has no {:?} tensor", self.backbone, p))
    }

    pub fn get_mut(&mut self, p: Param) -> &mut Array2<T> {
        let b = self.backbone;
        self.tensors[p as usize].as_mut().unwrap_or_else(|| panic!("{b} has no {p:?} tensor"))
    }

    pub fn try_get(&self, p: Param) -> Result<&Array2<T>> {
        self.tensors[p as usize]
            .as_ref()
            .ok_or_else(|| Error::shape(format!("{} parameters lack {}", self.backbone, p.name(self.backbone))))
    }

    /// Whether semantic fusion weights are present.
    pub fn fused(&self) -> bool {
        self.has(Param::FuseW)
    }

    pub fn n_entities(&self) -> usize {
        self.dims.n_entities
    }

    /// Width of a query state row.
    pub fn state_width(&self) -> usize {
        match self.backbone {
            Backbone::Gqe => self.dims.dim,
            Backbone::Q2b | Backbone::BetaE => 2 * self.dims.dim,
        }
    }

    /// Width of an entity row as seen by the distance kernels.
    pub fn view_width(&self) -> usize {
        match self.backbone {
            Backbone::Gqe | Backbone::Q2b => self.dims.dim,
            Backbone::BetaE => 2 * self.dims.dim,
        }
    }

    /// `(param, tensor)` pairs in fixed order.
    pub fn iter(&self) -> impl Iterator<Item = (Param, &Array2<T>)> {
        Param::ALL.into_iter().filter_map(move |p| self.tensors[p as usize].as_ref().map(|t| (p, t)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (Param, &mut Array2<T>)> {
        self.tensors.iter_mut().zip(Param::ALL).filter_map(|(t, p)| t.as_mut().map(|t| (p, t)))
    }

    pub fn fill_zero(&mut self) {
        for (_, t) in self.iter_mut() {
            t.fill(T::zero());
        }
    }

    pub fn n_scalars(&self) -> usize {
        self.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn bytes(&self) -> u64 {
        (self.n_scalars() * std::mem::size_of::<T>()) as u64
    }

    /// Replaces one tensor, checking its shape.
    pub fn set(&mut self, p: Param, t: Array2<T>) -> Result<()> {
        let cur = self.try_get(p)?;
        if cur.dim() != t.dim() {
            return Err(Error::shape(format!("{}: expected {:?}, got {:?}", p.name(self.backbone), cur.dim(), t.dim())));
        }
        self.tensors[p as usize] = Some(t);
        Ok(())
    }

    /// Largest absolute entrywise difference over all shared tensors.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let mut m = 0.0f64;
        for ((_, a), (_, b)) in self.iter().zip(other.iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                m = m.max((*x - *y).abs().as_f64());
            }
        }
        m
    }

    /// Effective Q2B relation offset `softplus(raw)`.
    pub fn effective_offsets(&self) -> Array2<T> {
        self.get(Param::RelationOffset).mapv(softplus)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims(sem: Option<usize>) -> ModelDims {
        ModelDims { n_entities: 10, n_relations: 3, dim: 4, hidden: 6, sem_dim: sem }
    }

    #[test]
    fn shapes_per_backbone() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ModelParams::<f64>::init(Backbone::BetaE, dims(Some(5)), 12.0, &mut rng);
        assert_eq!(p.get(Param::Entity).dim(), (10, 8));
        assert_eq!(p.get(Param::W1).dim(), (6, 12));
        assert_eq!(p.get(Param::FuseW).dim(), (4, 12));
        assert_eq!(p.get(Param::FusePsi).dim(), (8, 4));
        assert!(p.fused());
        let g = ModelParams::<f32>::init(Backbone::Gqe, dims(None), 12.0, &mut rng);
        assert!(!g.has(Param::W3));
        assert_eq!(g.state_width(), 4);
    }

    #[test]
    fn offsets_are_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = ModelParams::<f64>::init(Backbone::Q2b, dims(None), 12.0, &mut rng);
        assert!(p.effective_offsets().iter().all(|&o| o >= 0.0));
    }

    #[test]
    fn backbone_tags_round_trip() {
        for b in Backbone::ALL {
            assert_eq!(b.tag().parse::<Backbone>().unwrap(), b);
        }
        assert!("q2p".parse::<Backbone>().is_err());
    }
}
