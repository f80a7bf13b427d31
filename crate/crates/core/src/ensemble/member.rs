use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{DenseArray, OpKind, Scalar, Tape, Var};
use crate::weightgen::{LayerId, LayerKind, LayerSpec, MemberId, WeightShape};

/// One ensemble member: generated layers (each followed by relu), an
/// optional average pool between a convolutional stem and the affine layers,
/// and an unshared affine classifier head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemberSpec {
    pub member_id: MemberId,
    /// Per-sample input shape: `[features]` or `[channels, height, width]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    /// Pool window applied where the stem meets the affine layers; 1 disables it.
    pub pool: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Activation {
    Spatial(usize, usize, usize),
    Flat(usize),
}

/// Shape walk of a member: per-layer multiply-accumulate counts and the
/// number of features entering the head.
struct Walk {
    layer_macs: Vec<u64>,
    head_features: usize,
}

impl MemberSpec {
    /// Builds a member from a convolutional stem (`conv_channels`, square
    /// `kernel`) followed by affine `hidden` widths. Layer ids are assigned
    /// consecutively from `first_layer_id`.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        member_id: MemberId,
        first_layer_id: u32,
        input_shape: &[usize],
        conv_channels: &[usize],
        kernel: usize,
        pool: usize,
        hidden: &[usize],
        classes: usize,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        let mut id = first_layer_id;
        let mut push = |kind, shape| {
            layers.push(LayerSpec {
                layer_id: LayerId(id),
                member_id,
                kind,
                shape,
            });
            id += 1;
        };
        let mut features: usize = input_shape.iter().product();
        if !conv_channels.is_empty() {
            let [c, h, w] = input_shape else {
                return Err(Error::Member(format!(
                    "member {member_id}: a convolutional stem needs a [channels, height, width] input, got {input_shape:?}"
                )));
            };
            let mut prev = *c;
            for &ch in conv_channels {
                push(LayerKind::Conv2d, WeightShape::new(ch, prev, kernel, kernel));
                prev = ch;
            }
            let p = pool.max(1);
            features = prev * (h / p) * (w / p);
        }
        for &width in hidden {
            push(LayerKind::Affine, WeightShape::affine(width, features));
            features = width;
        }
        let spec = Self {
            member_id,
            input_shape: input_shape.to_vec(),
            layers,
            pool: pool.max(1),
            classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn walk(&self) -> Result<Walk> {
        let bad = |msg: String| Error::Member(format!("member {}: {msg}", self.member_id));
        let mut act = match self.input_shape.as_slice() {
            [d] if *d > 0 => Activation::Flat(*d),
            [c, h, w] if c * h * w > 0 => Activation::Spatial(*c, *h, *w),
            other => return Err(bad(format!("unsupported input shape {other:?}"))),
        };
        if self.pool == 0 {
            return Err(bad("pool window must be at least 1".into()));
        }
        let to_flat = |act: Activation| -> Result<usize> {
            match act {
                Activation::Flat(d) => Ok(d),
                Activation::Spatial(c, h, w) => {
                    if h % self.pool != 0 || w % self.pool != 0 {
                        return Err(bad(format!("pool window {} does not divide {h}x{w}", self.pool)));
                    }
                    Ok(c * (h / self.pool) * (w / self.pool))
                }
            }
        };
        let mut macs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            if layer.member_id != self.member_id {
                return Err(bad(format!("layer {} belongs to member {}", layer.layer_id, layer.member_id)));
            }
            layer.shape.validate()?;
            let s = layer.shape;
            match layer.kind {
                LayerKind::Conv2d => {
                    let Activation::Spatial(c, h, w) = act else {
                        return Err(bad(format!("conv layer {} follows an affine layer", layer.layer_id)));
                    };
                    if s.in_ch != c || s.kh % 2 == 0 || s.kw % 2 == 0 {
                        return Err(Error::Shape {
                            layer: format!("layer {}", layer.layer_id),
                            expected: vec![s.out_ch, c, s.kh | 1, s.kw | 1],
                            actual: s.dims().to_vec(),
                        });
                    }
                    macs.push((s.numel() * h * w) as u64);
                    act = Activation::Spatial(s.out_ch, h, w);
                }
                LayerKind::Affine => {
                    let d = to_flat(act)?;
                    if s.in_ch != d || s.kh != 1 || s.kw != 1 {
                        return Err(Error::Shape {
                            layer: format!("layer {}", layer.layer_id),
                            expected: vec![s.out_ch, d, 1, 1],
                            actual: s.dims().to_vec(),
                        });
                    }
                    macs.push(s.numel() as u64);
                    act = Activation::Flat(s.out_ch);
                }
            }
        }
        Ok(Walk {
            layer_macs: macs,
            head_features: to_flat(act)?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Member(format!("member {} has no generated layers", self.member_id)));
        }
        if self.classes < 2 {
            return Err(Error::Member(format!("member {} needs at least two classes", self.member_id)));
        }
        self.walk().map(|_| ())
    }

    pub fn input_features(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn head_features(&self) -> usize {
        self.walk().expect("validated member").head_features
    }

    /// Multiply-accumulate count of one sample's forward pass, head included.
    pub fn macs(&self) -> u64 {
        let w = self.walk().expect("validated member");
        w.layer_macs.iter().sum::<u64>() + (w.head_features * self.classes) as u64
    }

    /// Biases of generated layers plus the classifier head.
    pub fn unshared_parameters(&self) -> usize {
        let biases: usize = self.layers.iter().map(|l| l.shape.out_ch).sum();
        biases + self.head_features() * self.classes + self.classes
    }

    /// Parameters of the equivalent standard network.
    pub fn full_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.shape.numel()).sum::<usize>() + self.unshared_parameters()
    }

    /// Same layer kinds and shapes, input, pooling and classes.
    pub fn same_architecture(&self, other: &MemberSpec) -> bool {
        self.input_shape == other.input_shape
            && self.pool == other.pool
            && self.classes == other.classes
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.kind == b.kind && a.shape == b.shape)
    }
}

/// Records one member's forward pass. `x` is `(batch, features)`; weights
/// and biases are looked up per layer.
pub(crate) fn forward_member<T: Scalar>(
    tape: &mut Tape<T>,
    spec: &MemberSpec,
    x: &DenseArray<T>,
    weights: &BTreeMap<LayerId, Var>,
    biases: &BTreeMap<LayerId, Var>,
    head: (Var, Var),
) -> Result<Var> {
    let batch = x.shape()[0];
    if x.shape().len() != 2 || x.shape()[1] != spec.input_features() {
        return Err(Error::Shape {
            layer: format!("input of member {}", spec.member_id),
            expected: vec![batch, spec.input_features()],
            actual: x.shape().to_vec(),
        });
    }
    let mut dims = vec![batch];
    dims.extend_from_slice(&spec.input_shape);
    let mut h = tape.leaf(x.clone().reshape(&dims)?);
    let mut spatial = spec.input_shape.len() == 3;
    let flatten = |tape: &mut Tape<T>, h: Var, spatial: &mut bool| -> Result<Var> {
        if !*spatial {
            return Ok(h);
        }
        *spatial = false;
        let pooled = if spec.pool > 1 {
            tape.layer_forward("stem pool", OpKind::AvgPool { window: spec.pool }, h, None, None)?
        } else {
            h
        };
        Ok(tape.flatten(pooled))
    };
    for layer in &spec.layers {
        let name = format!("layer {}", layer.layer_id);
        let kind = match layer.kind {
            LayerKind::Conv2d => OpKind::Conv2d,
            LayerKind::Affine => {
                h = flatten(tape, h, &mut spatial)?;
                OpKind::Affine
            }
        };
        let w = *weights.get(&layer.layer_id).ok_or(Error::UnknownLayer(layer.layer_id.0))?;
        let b = biases.get(&layer.layer_id).copied();
        h = tape.layer_forward(&name, kind, h, Some(w), b)?;
        h = tape.layer_forward(&name, OpKind::Relu, h, None, None)?;
    }
    h = flatten(tape, h, &mut spatial)?;
    tape.layer_forward(&format!("head of member {}", spec.member_id), OpKind::Affine, h, Some(head.0), Some(head.1))
}
