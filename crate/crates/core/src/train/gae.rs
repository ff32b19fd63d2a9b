/// Generalized advantage estimates and returns for one environment's
/// trajectory segment. `bootstrap` is the value of the state after the last
/// step; `dones[t]` cuts the recursion after step `t`.
pub fn gae(
    rewards: &[f32],
    values: &[f32],
    dones: &[bool],
    bootstrap: f32,
    gamma: f32,
    lambda: f32,
) -> (Vec<f32>, Vec<f32>) {
    assert!(rewards.len() == values.len() && values.len() == dones.len(), "segment arrays differ in length");
    let (gamma, lambda) = (f64::from(gamma), f64::from(lambda));
    let n = rewards.len();
    let mut adv = vec![0.0f32; n];
    let mut running = 0.0f64;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { f64::from(values[t + 1]) } else { f64::from(bootstrap) };
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = f64::from(rewards[t]) + gamma * next_value * live - f64::from(values[t]);
        running = delta + gamma * lambda * live * running;
        adv[t] = running as f32;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Rescales to zero mean and unit (population) standard deviation.
pub fn normalize(x: &mut [f32]) {
    if x.is_empty() {
        return;
    }
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = x.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    for v in x.iter_mut() {
        *v = ((f64::from(*v) - mean) / std) as f32;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_step_td_with_zero_values() {
        let r = [0.5, -1.0, 2.0];
        let (a, ret) = gae(&r, &[0.0; 3], &[false; 3], 0.0, 0.99, 0.0);
        assert_eq!(a, r);
        assert_eq!(ret, r);
    }

    #[test]
    fn single_step() {
        let (a, ret) = gae(&[1.0], &[0.0], &[false], 0.0, 0.99, 0.95);
        assert_eq!((a[0], ret[0]), (1.0, 1.0));
    }

    #[test]
    fn done_blocks_bootstrap() {
        let (a, _) = gae(&[1.0, 1.0], &[0.0, 0.0], &[true, false], 100.0, 0.5, 1.0);
        assert_eq!(a[0], 1.0);
        assert_eq!(a[1], 51.0);
    }

    #[test]
    fn normalize_moments() {
        let mut x: Vec<f32> = (0..100).map(|i| (i * i) as f32).collect();
        normalize(&mut x);
        let m: f64 = x.iter().map(|&v| f64::from(v)).sum::<f64>() / 100.0;
        let s = (x.iter().map(|&v| (f64::from(v) - m).powi(2)).sum::<f64>() / 100.0).sqrt();
        assert!(m.abs() < 1e-6);
        assert!((s - 1.0).abs() < 1e-4);
    }
}
