//! Adam with bias correction, aware of pruning masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::ParamGrads;
use crate::network::Network;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments, one slot per parameter tensor (weight then bias
/// of every parametric layer, in layer order).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn for_network(net: &Network) -> Self {
        let slots: Vec<usize> = net
            .layers()
            .iter()
            .filter_map(|l| l.params())
            .flat_map(|p| [p.weight.len(), p.bias.len()])
            .collect();
        AdamState {
            step: 0,
            first: slots.iter().map(|&n| vec![0.0; n]).collect(),
            second: slots.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One Adam update of a parameter slice at (1-based) step `step`. Entries with
/// `frozen[i] == true` keep their value and get their moments zeroed.
pub fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    first: &mut [f64],
    second: &mut [f64],
    step: u64,
    config: &AdamConfig,
    frozen: Option<&[bool]>,
) {
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        eps,
    } = *config;
    let c1 = 1.0 - beta1.powi(step as i32);
    let c2 = 1.0 - beta2.powi(step as i32);
    for i in 0..params.len() {
        if frozen.is_some_and(|f| f[i]) {
            first[i] = 0.0;
            second[i] = 0.0;
            continue;
        }
        let g = grads[i];
        first[i] = beta1 * first[i] + (1.0 - beta1) * g;
        second[i] = beta2 * second[i] + (1.0 - beta2) * g * g;
        let m_hat = first[i] / c1;
        let v_hat = second[i] / c2;
        params[i] -= learning_rate * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Applies one Adam step to every parametric layer of `net`. Masked units and
/// frozen incoming weights are left untouched.
pub fn adam_step(net: &mut Network, grads: &[Option<ParamGrads>], state: &mut AdamState, config: &AdamConfig) -> Result<()> {
    if grads.len() != net.len() {
        return Err(Error::Consistency("one gradient slot per layer required".into()));
    }
    if state.first.is_empty() {
        *state = AdamState::for_network(net);
    }
    for (layer, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if !g.weight.is_finite() || !g.bias.is_finite() {
                return Err(Error::Training {
                    layer,
                    reason: "non-finite gradient".into(),
                });
            }
        }
    }
    state.step += 1;
    let mut slot = 0;
    for layer in 0..net.len() {
        if !net.layer(layer).kind().has_params() {
            continue;
        }
        let grads = grads[layer]
            .as_ref()
            .ok_or_else(|| Error::Consistency(format!("missing gradient for layer {layer}")))?;
        let frozen_w = net.frozen_weights(layer);
        let frozen_b: Option<Vec<bool>> = net.mask(layer).map(|m| m.iter().map(|a| !a).collect());
        let p = net.layer_mut(layer).params_mut().expect("parametric");
        if p.weight.len() != state.first[slot].len() || p.bias.len() != state.first[slot + 1].len() {
            return Err(Error::Consistency("optimizer state does not match the network".into()));
        }
        adam_update(
            p.weight.data_mut(),
            grads.weight.data(),
            &mut state.first[slot],
            &mut state.second[slot],
            state.step,
            config,
            frozen_w.as_deref(),
        );
        adam_update(
            p.bias.data_mut(),
            grads.bias.data(),
            &mut state.first[slot + 1],
            &mut state.second[slot + 1],
            state.step,
            config,
            frozen_b.as_deref(),
        );
        slot += 2;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::LayerKind;
    use crate::tensor::Tensor;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut w = vec![0.3, -1.2];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        adam_update(&mut w, &[0.0, 0.0], &mut m, &mut v, 1, &AdamConfig::default(), None);
        assert_eq!(w, vec![0.3, -1.2]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut w = vec![1.0];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        adam_update(&mut w, &[1.0], &mut m, &mut v, 1, &AdamConfig::default(), None);
        assert!((w[0] - 0.95).abs() < 1e-6, "{}", w[0]);
    }

    #[test]
    fn frozen_entries_keep_value_and_drop_moments() {
        let mut w = vec![1.0, 2.0];
        let (mut m, mut v) = (vec![0.5, 0.5], vec![0.5, 0.5]);
        adam_update(&mut w, &[3.0, 3.0], &mut m, &mut v, 4, &AdamConfig::default(), Some(&[false, true]));
        assert_eq!(w[1], 2.0);
        assert_eq!((m[1], v[1]), (0.0, 0.0));
        assert_ne!(w[0], 1.0);
    }

    fn small_net() -> Network {
        let kinds = [
            LayerKind::Dense { inputs: 2, outputs: 3 },
            LayerKind::Relu,
            LayerKind::Dense { inputs: 3, outputs: 2 },
        ];
        Network::from_kinds(vec![2], &kinds, 1, 4).unwrap()
    }

    fn unit_grads(net: &Network) -> Vec<Option<ParamGrads>> {
        net.layers()
            .iter()
            .map(|l| {
                l.params().map(|p| ParamGrads {
                    weight: Tensor::filled(p.weight.shape(), 1.0),
                    bias: Tensor::filled(p.bias.shape(), 1.0),
                })
            })
            .collect()
    }

    #[test]
    fn masked_filter_ignores_stored_gradient() {
        let mut net = small_net();
        net.apply_mask(0, 1).unwrap();
        let before = net.clone();
        let grads = unit_grads(&net);
        let mut state = AdamState::for_network(&net);
        adam_step(&mut net, &grads, &mut state, &AdamConfig::default()).unwrap();
        let (w0, w1) = (&before.layer(0).params().unwrap().weight, &net.layer(0).params().unwrap().weight);
        assert_eq!(w0.row(1), w1.row(1));
        assert_ne!(w0.row(0), w1.row(0));
        // incoming column 1 of the next layer stays frozen too
        let (v0, v1) = (&before.layer(2).params().unwrap().weight, &net.layer(2).params().unwrap().weight);
        for j in 0..2 {
            assert_eq!(v0.row(j)[1], v1.row(j)[1]);
        }
    }

    #[test]
    fn non_finite_gradient_names_layer() {
        let mut net = small_net();
        let mut grads = unit_grads(&net);
        grads[2].as_mut().unwrap().bias.data_mut()[0] = f64::NAN;
        let mut state = AdamState::for_network(&net);
        let before = net.clone();
        match adam_step(&mut net, &grads, &mut state, &AdamConfig::default()) {
            Err(Error::Training { layer, .. }) => assert_eq!(layer, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(net, before);
        assert_eq!(state.step, 0);
    }
}
