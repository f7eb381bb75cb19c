//! JSON instance files.
//!
//! ```json
//! {
//!   "horizon": 2,
//!   "num_states": 2,
//!   "num_actions": 3,            // or [A1, A2] for a zero-sum game
//!   "transitions": [[[[...]]]],  // [h][s][a][s'] or [h][s][a1][a2][s']
//!   "rewards": [[[...]]],        // [h][s][a] or [h][s][a1][a2]
//!   "sigma": 0.1                 // optional; makes the file a robust instance
//! }
//! ```
//!
//! Floats are written in shortest round-trip form, so a save/load cycle is
//! bit-exact.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EpisodicMdp, RobustSpec, ZeroSumGame};

#[derive(Clone, Debug, PartialEq)]
pub enum Instance {
    Mdp(EpisodicMdp),
    Game(ZeroSumGame),
    Robust(RobustSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum ActionCount {
    Single(usize),
    Pair([usize; 2]),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum Nested {
    Leaf(f64),
    Node(Vec<Nested>),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceFile {
    horizon: usize,
    num_states: usize,
    num_actions: ActionCount,
    transitions: Nested,
    rewards: Nested,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma: Option<f64>,
}

fn nest(a: &ArrayD<f64>) -> Nested {
    if a.ndim() == 0 {
        return Nested::Leaf(a[IxDyn(&[])]);
    }
    Nested::Node(a.outer_iter().map(|sub| nest(&sub.to_owned())).collect())
}

fn flatten(n: &Nested, shape: &[usize], field: &str, out: &mut Vec<f64>) -> Result<()> {
    match (n, shape.split_first()) {
        (Nested::Leaf(x), None) => {
            out.push(*x);
            Ok(())
        }
        (Nested::Node(items), Some((&len, rest))) if items.len() == len => {
            items.iter().try_for_each(|i| flatten(i, rest, field, out))
        }
        _ => Err(Error::shape(format!("`{field}` does not have shape {shape:?}"))),
    }
}

fn dense(n: &Nested, shape: &[usize], field: &str) -> Result<ArrayD<f64>> {
    let mut out = Vec::with_capacity(shape.iter().product());
    flatten(n, shape, field, &mut out)?;
    Ok(ArrayD::from_shape_vec(IxDyn(shape), out).expect("length checked by flatten"))
}

impl Instance {
    pub fn from_json(text: &str) -> Result<Instance> {
        let f: InstanceFile = serde_json::from_str(text)?;
        let (h, s) = (f.horizon, f.num_states);
        match f.num_actions {
            ActionCount::Single(a) => {
                let p = dense(&f.transitions, &[h, s, a, s], "transitions")?;
                let r = dense(&f.rewards, &[h, s, a], "rewards")?;
                let mdp = EpisodicMdp::new(
                    p.into_dimensionality().expect("4-d"),
                    r.into_dimensionality().expect("3-d"),
                )?;
                Ok(match f.sigma {
                    Some(sigma) => Instance::Robust(RobustSpec::new(mdp, sigma)?),
                    None => Instance::Mdp(mdp),
                })
            }
            ActionCount::Pair([a1, a2]) => {
                if f.sigma.is_some() {
                    return Err(Error::input("robust zero-sum games are not supported"));
                }
                let p = dense(&f.transitions, &[h, s, a1, a2, s], "transitions")?;
                let r = dense(&f.rewards, &[h, s, a1, a2], "rewards")?;
                Ok(Instance::Game(ZeroSumGame::new(
                    p.into_dimensionality().expect("5-d"),
                    r.into_dimensionality().expect("4-d"),
                )?))
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let (mdp, sigma) = match self {
            Instance::Mdp(m) => (Some(m), None),
            Instance::Robust(r) => (Some(r.nominal()), Some(r.sigma())),
            Instance::Game(_) => (None, None),
        };
        let file = match (mdp, self) {
            (Some(m), _) => InstanceFile {
                horizon: m.horizon(),
                num_states: m.num_states(),
                num_actions: ActionCount::Single(m.num_actions()),
                transitions: nest(&m.transitions().clone().into_dyn()),
                rewards: nest(&m.rewards().clone().into_dyn()),
                sigma,
            },
            (None, Instance::Game(g)) => InstanceFile {
                horizon: g.horizon(),
                num_states: g.num_states(),
                num_actions: ActionCount::Pair([g.max_actions(), g.min_actions()]),
                transitions: nest(&g.transitions().clone().into_dyn()),
                rewards: nest(&g.rewards().clone().into_dyn()),
                sigma: None,
            },
            _ => unreachable!(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Instance> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| e.context(format!("loading {}", path.display())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, Array4, Array5};

    #[test]
    fn mdp_round_trip_is_exact() {
        let p = Array4::from_shape_fn((2, 2, 1, 2), |(h, s, _, x)| {
            let q = 1.0 / (3.0 + h as f64 + s as f64);
            if x == 0 { q } else { 1.0 - q }
        });
        let r = Array3::from_shape_fn((2, 2, 1), |(h, s, _)| 0.1 * (h + s) as f64 + 1e-17);
        let inst = Instance::Mdp(EpisodicMdp::new(p, r).unwrap());
        assert_eq!(Instance::from_json(&inst.to_json().unwrap()).unwrap(), inst);
        let robust = Instance::Robust(RobustSpec::new(
            match &inst {
                Instance::Mdp(m) => m.clone(),
                _ => unreachable!(),
            },
            0.3,
        ).unwrap());
        assert_eq!(Instance::from_json(&robust.to_json().unwrap()).unwrap(), robust);
    }

    #[test]
    fn game_round_trip() {
        let p = Array5::from_shape_fn((1, 1, 2, 3, 1), |_| 1.0);
        let r = Array4::from_shape_fn((1, 1, 2, 3), |(_, _, a, b)| (a * 3 + b) as f64 / 7.0);
        let inst = Instance::Game(ZeroSumGame::new(p, r).unwrap());
        assert_eq!(Instance::from_json(&inst.to_json().unwrap()).unwrap(), inst);
    }

    #[test]
    fn wrong_shape_names_field() {
        let text = r#"{"horizon":1,"num_states":1,"num_actions":2,
            "transitions":[[[[1.0]]]],"rewards":[[[0.5,0.5]]]}"#;
        let err = Instance::from_json(text).unwrap_err().to_string();
        assert!(err.contains("transitions"), "{err}");
    }
}
