//! Binary model format.
//!
//! ```text
//! "HEGP" | version u16 | kind u8 | feature_dim u32 | target_dim u32
//! layout flag u8 [keypoints u32 | n_models u32 | (len u32, utf8)*]
//! payload (kind specific)
//! ```
//!
//! All integers and floats are little-endian; floats are written as their
//! raw bits so a round trip is exact.

use super::forest::{ForestModel, Node, Tree};
use super::matrix::Matrix;
use super::mlp::MlpModel;
use super::ridge::RidgeModel;
use super::{FeatureLayout, LearnerParams, MetaLearner, StackingError};

pub const MAGIC: &[u8; 4] = b"HEGP";
pub const FORMAT_VERSION: u16 = 1;

const KIND_RIDGE: u8 = 0;
const KIND_FOREST: u8 = 1;
const KIND_MLP: u8 = 2;
const NODE_LEAF: u8 = 0;
const NODE_SPLIT: u8 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("dimension fits in u32");
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        vs.iter().for_each(|&v| self.f64(v));
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], StackingError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(StackingError::Truncated)?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, StackingError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, StackingError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<usize, StackingError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn f64(&mut self) -> Result<f64, StackingError> {
        Ok(f64::from_bits(u64::from_le_bytes(self.take(8)?.try_into().unwrap())))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, StackingError> {
        // Reject absurd counts before allocating.
        if n.saturating_mul(8) > self.buf.len() - self.pos {
            return Err(StackingError::Truncated);
        }
        (0..n).map(|_| self.f64()).collect()
    }
    fn str(&mut self) -> Result<String, StackingError> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| StackingError::Codec(format!("model id is not utf-8: {e}")))
    }
}

pub(crate) fn encode(m: &MetaLearner) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u16(FORMAT_VERSION);
    w.u8(match m.params() {
        LearnerParams::Ridge(_) => KIND_RIDGE,
        LearnerParams::RandomForest(_) => KIND_FOREST,
        LearnerParams::Mlp(_) => KIND_MLP,
    });
    w.u32(m.feature_dim());
    w.u32(m.target_dim());
    match m.layout() {
        None => w.u8(0),
        Some(l) => {
            w.u8(1);
            w.u32(l.keypoints);
            w.u32(l.model_ids.len());
            l.model_ids.iter().for_each(|id| w.str(id));
        }
    }
    match m.params() {
        LearnerParams::Ridge(r) => {
            w.f64s(r.coefficients.as_slice());
            w.f64s(&r.intercept);
        }
        LearnerParams::RandomForest(f) => {
            w.u32(f.trees.len());
            for t in &f.trees {
                w.u32(t.nodes.len());
                for n in &t.nodes {
                    match n {
                        Node::Leaf(v) => {
                            w.u8(NODE_LEAF);
                            w.f64s(v);
                        }
                        Node::Split {
                            feature,
                            threshold,
                            left,
                            right,
                        } => {
                            w.u8(NODE_SPLIT);
                            w.u32(*feature);
                            w.f64(*threshold);
                            w.u32(*left);
                            w.u32(*right);
                        }
                    }
                }
            }
        }
        LearnerParams::Mlp(net) => {
            w.u32(net.sizes().len());
            net.sizes().iter().for_each(|&s| w.u32(s));
            w.f64s(net.params());
        }
    }
    w.0
}

pub(crate) fn decode(buf: &[u8]) -> Result<MetaLearner, StackingError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4).map_err(|_| StackingError::BadMagic)? != MAGIC {
        return Err(StackingError::BadMagic);
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(StackingError::UnsupportedVersion(version));
    }
    let kind = r.u8()?;
    let feature_dim = r.u32()?;
    let target_dim = r.u32()?;
    let layout = match r.u8()? {
        0 => None,
        1 => {
            let keypoints = r.u32()?;
            let n = r.u32()?;
            let model_ids = (0..n).map(|_| r.str()).collect::<Result<Vec<_>, _>>()?;
            Some(FeatureLayout::new(model_ids, keypoints)?)
        }
        f => return Err(StackingError::Codec(format!("bad layout flag {f}"))),
    };
    let params = match kind {
        KIND_RIDGE => {
            let coef = r.f64s(feature_dim.saturating_mul(target_dim))?;
            let intercept = r.f64s(target_dim)?;
            LearnerParams::Ridge(RidgeModel {
                coefficients: Matrix::from_vec(feature_dim, target_dim, coef),
                intercept,
            })
        }
        KIND_FOREST => {
            let n_trees = r.u32()?;
            if n_trees == 0 {
                return Err(StackingError::Codec("forest without trees".into()));
            }
            let mut trees = Vec::new();
            for _ in 0..n_trees {
                let n_nodes = r.u32()?;
                if n_nodes == 0 {
                    return Err(StackingError::Codec("empty tree".into()));
                }
                let mut nodes = Vec::new();
                for _ in 0..n_nodes {
                    nodes.push(match r.u8()? {
                        NODE_LEAF => Node::Leaf(r.f64s(target_dim)?),
                        NODE_SPLIT => {
                            let feature = r.u32()?;
                            let threshold = r.f64()?;
                            let (left, right) = (r.u32()?, r.u32()?);
                            if feature >= feature_dim || left >= n_nodes || right >= n_nodes {
                                return Err(StackingError::Codec("tree node index out of range".into()));
                            }
                            Node::Split {
                                feature,
                                threshold,
                                left,
                                right,
                            }
                        }
                        t => return Err(StackingError::Codec(format!("bad node tag {t}"))),
                    });
                }
                check_acyclic(&nodes)?;
                trees.push(Tree { nodes });
            }
            LearnerParams::RandomForest(ForestModel { trees, target_dim })
        }
        KIND_MLP => {
            let n = r.u32()?;
            if n > 1024 {
                return Err(StackingError::Codec(format!("implausible layer count {n}")));
            }
            let sizes = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
            let count = sizes
                .windows(2)
                .try_fold(0usize, |acc, w| w[0].checked_mul(w[1])?.checked_add(w[1])?.checked_add(acc))
                .ok_or(StackingError::Truncated)?;
            let params = r.f64s(count)?;
            let net = MlpModel::from_parts(sizes, params)?;
            if net.input_dim() != feature_dim || net.output_dim() != target_dim {
                return Err(StackingError::Codec("network shape disagrees with header".into()));
            }
            LearnerParams::Mlp(net)
        }
        k => return Err(StackingError::Codec(format!("unknown learner kind {k}"))),
    };
    if r.pos != buf.len() {
        return Err(StackingError::Codec(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    MetaLearner::from_params(params, feature_dim, target_dim, layout)
}

// Children must come after their parent, which rules out cycles.
fn check_acyclic(nodes: &[Node]) -> Result<(), StackingError> {
    for (i, n) in nodes.iter().enumerate() {
        if let Node::Split { left, right, .. } = n {
            if *left <= i || *right <= i {
                return Err(StackingError::Codec("tree children must follow their parent".into()));
            }
        }
    }
    Ok(())
}
