//! Grouped learning rates over the encoder's named parameters.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Learning-rate multipliers of the four-group setup: embeddings plus the
/// first third of the blocks, the middle third, the last third, the head.
pub const FOUR_GROUP_MULTIPLIERS: [f64; 4] = [1.0 / 2.6, 1.0, 2.6, 10.0];

const HEAD_MULTIPLIER: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LlrdSetup {
    /// One rate for the whole model.
    Uniform,
    /// Encoder at the base rate, head at ten times it.
    TwoGroup,
    /// Three encoder thirds plus the head, each with its own rate.
    FourGroup,
}

impl fmt::Display for LlrdSetup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LlrdSetup::Uniform => "uniform",
            LlrdSetup::TwoGroup => "2group",
            LlrdSetup::FourGroup => "4group",
        })
    }
}

impl FromStr for LlrdSetup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" | "none" | "1group" => Ok(LlrdSetup::Uniform),
            "2group" | "two" | "twogroup" => Ok(LlrdSetup::TwoGroup),
            "4group" | "four" | "fourgroup" => Ok(LlrdSetup::FourGroup),
            other => Err(Error::config(format!(
                "unknown llrd setup {other:?} (expected uniform, 2group or 4group)"
            ))),
        }
    }
}

/// A set of parameters sharing one learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub param_names: BTreeSet<String>,
    pub lr_multiplier: f64,
    /// `base_lr * lr_multiplier`.
    pub lr: f64,
}

enum Section {
    Embed,
    Layer(usize),
    Pooler,
    Head,
}

/// Block index of a `layer.<i>.*` name.
pub fn layer_index(name: &str) -> Option<usize> {
    name.strip_prefix("layer.")?.split('.').next()?.parse().ok()
}

fn section(name: &str) -> Result<Section> {
    if name.starts_with("embed.") {
        Ok(Section::Embed)
    } else if name.starts_with("pooler.") {
        Ok(Section::Pooler)
    } else if name.starts_with("head.") {
        Ok(Section::Head)
    } else if let Some(i) = layer_index(name) {
        Ok(Section::Layer(i))
    } else {
        Err(Error::contract(format!("cannot place parameter {name:?} in a group")))
    }
}

/// Sizes of three consecutive layer buckets covering `num_layers` blocks,
/// as even as possible with earlier buckets never larger than later ones.
fn thirds(num_layers: usize) -> [usize; 3] {
    let base = num_layers / 3;
    let rem = num_layers % 3;
    let mut sizes = [base; 3];
    for s in sizes.iter_mut().skip(3 - rem) {
        *s += 1;
    }
    sizes
}

/// Partitions `param_names` into learning-rate groups.
///
/// Under [`LlrdSetup::FourGroup`] the pooler joins the last third of the
/// blocks, since it reads the final layer.
pub fn build_param_groups<S: AsRef<str>>(
    param_names: &[S],
    num_layers: usize,
    setup: LlrdSetup,
    base_lr: f64,
) -> Result<Vec<ParamGroup>> {
    if !(base_lr.is_finite() && base_lr > 0.0) {
        return Err(Error::config(format!("base learning rate {base_lr} must be positive")));
    }
    let spec: Vec<(&str, f64)> = match setup {
        LlrdSetup::Uniform => vec![("all", 1.0)],
        LlrdSetup::TwoGroup => vec![("encoder", 1.0), ("head", HEAD_MULTIPLIER)],
        LlrdSetup::FourGroup => vec![
            ("group1", FOUR_GROUP_MULTIPLIERS[0]),
            ("group2", FOUR_GROUP_MULTIPLIERS[1]),
            ("group3", FOUR_GROUP_MULTIPLIERS[2]),
            ("head", FOUR_GROUP_MULTIPLIERS[3]),
        ],
    };
    let [a, b, _] = thirds(num_layers);
    let mut groups: Vec<ParamGroup> = spec
        .iter()
        .map(|(name, m)| ParamGroup {
            name: name.to_string(),
            param_names: BTreeSet::new(),
            lr_multiplier: *m,
            lr: base_lr * m,
        })
        .collect();

    for name in param_names {
        let name = name.as_ref();
        let sec = section(name)?;
        let slot = match (setup, sec) {
            (LlrdSetup::Uniform, _) => 0,
            (LlrdSetup::TwoGroup, Section::Head) => 1,
            (LlrdSetup::TwoGroup, _) => 0,
            (LlrdSetup::FourGroup, Section::Embed) => 0,
            (LlrdSetup::FourGroup, Section::Layer(i)) => {
                if i >= num_layers {
                    return Err(Error::contract(format!(
                        "parameter {name:?} refers to layer {i} of a {num_layers}-layer encoder"
                    )));
                }
                if i < a {
                    0
                } else if i < a + b {
                    1
                } else {
                    2
                }
            }
            (LlrdSetup::FourGroup, Section::Pooler) => 2,
            (LlrdSetup::FourGroup, Section::Head) => 3,
        };
        if !groups[slot].param_names.insert(name.to_string()) {
            return Err(Error::contract(format!("duplicate parameter name {name:?}")));
        }
    }
    Ok(groups)
}
