use std::collections::BTreeMap;

use crate::ensemble::member::forward_member;
use crate::ensemble::MemberSpec;
use crate::error::{Error, Result};
use crate::numerics::{softmax, DenseArray, Scalar, Tape};
use crate::weightgen::LayerId;

/// A member with materialized weights, evaluated without the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenMember<T> {
    spec: MemberSpec,
    weights: BTreeMap<LayerId, DenseArray<T>>,
    biases: BTreeMap<LayerId, DenseArray<T>>,
    head_weight: DenseArray<T>,
    head_bias: DenseArray<T>,
}

impl<T: Scalar> FrozenMember<T> {
    pub fn new(
        spec: MemberSpec,
        weights: BTreeMap<LayerId, DenseArray<T>>,
        biases: BTreeMap<LayerId, DenseArray<T>>,
        head_weight: DenseArray<T>,
        head_bias: DenseArray<T>,
    ) -> Result<Self> {
        spec.validate()?;
        for l in &spec.layers {
            let w = weights.get(&l.layer_id).ok_or(Error::UnknownLayer(l.layer_id.0))?;
            if w.shape() != l.shape.dims() {
                return Err(Error::Shape {
                    layer: format!("layer {}", l.layer_id),
                    expected: l.shape.dims().to_vec(),
                    actual: w.shape().to_vec(),
                });
            }
            if biases.get(&l.layer_id).map(DenseArray::len) != Some(l.shape.out_ch) {
                return Err(Error::Member(format!("bias of layer {} missing or mis-sized", l.layer_id)));
            }
        }
        if head_weight.shape() != [spec.classes, spec.head_features()] || head_bias.len() != spec.classes {
            return Err(Error::Shape {
                layer: format!("head of member {}", spec.member_id),
                expected: vec![spec.classes, spec.head_features()],
                actual: head_weight.shape().to_vec(),
            });
        }
        Ok(Self {
            spec,
            weights,
            biases,
            head_weight,
            head_bias,
        })
    }

    pub fn spec(&self) -> &MemberSpec {
        &self.spec
    }

    pub fn weight(&self, layer: LayerId) -> Option<&DenseArray<T>> {
        self.weights.get(&layer)
    }

    pub fn logits(&self, x: &DenseArray<T>) -> Result<DenseArray<T>> {
        let mut tape = Tape::new();
        let weights = self.weights.iter().map(|(&l, w)| (l, tape.leaf(w.clone()))).collect();
        let biases = self.biases.iter().map(|(&l, b)| (l, tape.leaf(b.clone()))).collect();
        let head = (tape.leaf(self.head_weight.clone()), tape.leaf(self.head_bias.clone()));
        let out = forward_member(&mut tape, &self.spec, x, &weights, &biases, head)?;
        Ok(tape.value(out).clone())
    }

    pub fn predict_proba(&self, x: &DenseArray<T>) -> Result<DenseArray<T>> {
        Ok(softmax(&self.logits(x)?))
    }
}

/// Mean of the members' softmax outputs.
pub fn ensemble_predict<T: Scalar>(members: &[&FrozenMember<T>], x: &DenseArray<T>) -> Result<DenseArray<T>> {
    let probs = members.iter().map(|m| m.predict_proba(x)).collect::<Result<Vec<_>>>()?;
    average_probs(&probs)
}

/// Elementwise mean of equally shaped probability tables.
pub fn average_probs<T: Scalar>(probs: &[DenseArray<T>]) -> Result<DenseArray<T>> {
    let (first, rest) = probs.split_first().ok_or(Error::EmptySubset)?;
    let mut acc = first.clone();
    for p in rest {
        acc.add_assign(p)?;
    }
    acc.scale(T::lit(1.0 / probs.len() as f64));
    Ok(acc)
}

/// Parameter-space interpolation `(1 - lambda) a + lambda b` of generated
/// weights, biases and heads. The endpoints return exact copies.
pub fn interpolate_members<T: Scalar>(a: &FrozenMember<T>, b: &FrozenMember<T>, lambda: f64) -> Result<FrozenMember<T>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config("lambda", format!("{lambda} is outside [0, 1]")));
    }
    if !a.spec.same_architecture(&b.spec) {
        return Err(Error::Shape {
            layer: "interpolated members".into(),
            expected: a.spec.layers.iter().flat_map(|l| l.shape.dims()).collect(),
            actual: b.spec.layers.iter().flat_map(|l| l.shape.dims()).collect(),
        });
    }
    let lam = T::lit(lambda);
    let mut weights = BTreeMap::new();
    let mut biases = BTreeMap::new();
    for (la, lb) in a.spec.layers.iter().zip(&b.spec.layers) {
        weights.insert(la.layer_id, a.weights[&la.layer_id].lerp(&b.weights[&lb.layer_id], lam)?);
        biases.insert(la.layer_id, a.biases[&la.layer_id].lerp(&b.biases[&lb.layer_id], lam)?);
    }
    FrozenMember::new(
        a.spec.clone(),
        weights,
        biases,
        a.head_weight.lerp(&b.head_weight, lam)?,
        a.head_bias.lerp(&b.head_bias, lam)?,
    )
}
