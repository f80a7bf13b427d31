use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub u32);

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_type!(
    /// Unique across every member of a model.
    LayerId
);
id_type!(MemberId);
id_type!(SlotId);
id_type!(BankId);
id_type!(CoeffId);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Affine,
    Conv2d,
}

/// `(out_ch, in_ch, kh, kw)`; affine layers use `kh = kw = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WeightShape {
    pub out_ch: usize,
    pub in_ch: usize,
    pub kh: usize,
    pub kw: usize,
}

impl WeightShape {
    pub fn new(out_ch: usize, in_ch: usize, kh: usize, kw: usize) -> Self {
        Self { out_ch, in_ch, kh, kw }
    }

    pub fn affine(out_ch: usize, in_ch: usize) -> Self {
        Self::new(out_ch, in_ch, 1, 1)
    }

    pub fn numel(&self) -> usize {
        self.out_ch * self.in_ch * self.kh * self.kw
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.out_ch, self.in_ch)
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.kh, self.kw)
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.out_ch, self.in_ch, self.kh, self.kw]
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims().contains(&0) {
            return Err(Error::Member(format!("weight shape {:?} has a zero extent", self.dims())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub layer_id: LayerId,
    pub member_id: MemberId,
    pub kind: LayerKind,
    pub shape: WeightShape,
}

impl LayerSpec {
    pub fn fan_in(&self) -> usize {
        self.shape.in_ch * self.shape.kh * self.shape.kw
    }
}

/// Checks positive extents and unique layer ids.
pub fn validate_layers(layers: &[LayerSpec]) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for layer in layers {
        layer.shape.validate()?;
        if layer.kind == LayerKind::Affine && layer.shape.kernel() != (1, 1) {
            return Err(Error::Member(format!(
                "affine layer {} must have a 1x1 kernel",
                layer.layer_id
            )));
        }
        if !seen.insert(layer.layer_id) {
            return Err(Error::Member(format!("duplicate layer id {}", layer.layer_id)));
        }
    }
    Ok(())
}
