//! WebAssembly bindings behind `www/index.html`.
//!
//! Three operations are exported: simulate the 5-agent ring with a chosen
//! delay and threshold, measure how far the consensus gain is from exact
//! averaging at a given frequency, and run a send-on-delta gate over a signal.
//! The plain functions are usable natively; the `#[wasm_bindgen]` wrappers
//! only convert errors.

use consensus_etkf::consensus::{averaging_matrix, steady_state_gain};
use consensus_etkf::sod::{Channel, SodGate};
use consensus_etkf::{compute_metrics, paper_scenario, run_scenario, CommGraph};
use wasm_bindgen::prelude::*;

/// Settling band used for the summary numbers, in volts.
const BAND: f64 = 0.5;
/// Every n-th tick is kept for plotting.
const PLOT_STRIDE: usize = 5;

/// Plot-ready result of one run.
#[wasm_bindgen]
#[derive(Debug, Clone)]
pub struct Simulation {
    agents: usize,
    times: Vec<f64>,
    /// `xhat[agent][sample]`
    xhat: Vec<Vec<f64>>,
    x_true: Vec<Vec<f64>>,
    settling: Vec<f64>,
    events: u64,
    reduction_ratio: f64,
}

#[wasm_bindgen]
impl Simulation {
    pub fn agents(&self) -> usize {
        self.agents
    }

    pub fn times(&self) -> Vec<f64> {
        self.times.clone()
    }

    pub fn xhat(&self, agent: usize) -> Vec<f64> {
        self.xhat.get(agent).cloned().unwrap_or_default()
    }

    #[wasm_bindgen(js_name = xTrue)]
    pub fn x_true(&self, agent: usize) -> Vec<f64> {
        self.x_true.get(agent).cloned().unwrap_or_default()
    }

    /// Per-agent settling time into +-0.5 V of the average; NaN if never.
    pub fn settling(&self) -> Vec<f64> {
        self.settling.clone()
    }

    pub fn events(&self) -> f64 {
        self.events as f64
    }

    #[wasm_bindgen(js_name = reductionRatio)]
    pub fn reduction_ratio(&self) -> f64 {
        self.reduction_ratio
    }
}

/// Runs the 5-agent ring with the given delay (ms), voltage threshold (V)
/// and length (s).
pub fn simulate(delay_ms: f64, delta: f64, duration_s: f64) -> Result<Simulation, String> {
    let mut config = paper_scenario(false);
    config.delay_ms = delay_ms;
    config.delta_voltage = delta;
    config.duration_s = duration_s;
    let trace = run_scenario(&config).map_err(|e| e.to_string())?;
    let metrics = compute_metrics(&trace, BAND).map_err(|e| e.to_string())?;
    let agents = config.n();
    let mut sim = Simulation {
        agents,
        times: Vec::new(),
        xhat: vec![Vec::new(); agents],
        x_true: vec![Vec::new(); agents],
        settling: metrics
            .settling_time
            .iter()
            .map(|s| s.unwrap_or(f64::NAN))
            .collect(),
        events: metrics.total_events,
        reduction_ratio: metrics.reduction_ratio,
    };
    for tick in trace.rows.chunks(agents).step_by(PLOT_STRIDE) {
        sim.times.push(tick[0].t);
        for row in tick {
            sim.xhat[row.agent].push(row.xhat);
            sim.x_true[row.agent].push(row.x_true);
        }
    }
    Ok(sim)
}

/// Largest entry of `s (sI + L)^-1 - 11'/n` on an `n`-agent ring.
pub fn gain_deviation(n: usize, s: f64) -> Result<f64, String> {
    let l = CommGraph::ring(n).map_err(|e| e.to_string())?.laplacian();
    let gain = steady_state_gain(&l, s).map_err(|e| e.to_string())?;
    let avg = averaging_matrix(n).map_err(|e| e.to_string())?;
    Ok((gain - avg).amax())
}

/// Value a listener holds after each sample of `signal` (one sample per
/// second) passes a send-on-delta gate with threshold `delta`.
pub fn sod_hold(signal: &[f64], delta: f64) -> Result<Vec<f64>, String> {
    let mut gate = SodGate::new(delta).map_err(|e| e.to_string())?;
    let mut held = Vec::with_capacity(signal.len());
    for (k, &y) in signal.iter().enumerate() {
        gate.evaluate(y, k as f64, 0, Channel::State)
            .map_err(|e| e.to_string())?;
        held.push(gate.last_sent().expect("first sample is always sent"));
    }
    Ok(held)
}

#[wasm_bindgen(js_name = simulate)]
pub fn simulate_js(delay_ms: f64, delta: f64, duration_s: f64) -> Result<Simulation, JsError> {
    simulate(delay_ms, delta, duration_s).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = gainDeviation)]
pub fn gain_deviation_js(n: usize, s: f64) -> Result<f64, JsError> {
    gain_deviation(n, s).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = sodHold)]
pub fn sod_hold_js(signal: Vec<f64>, delta: f64) -> Result<Vec<f64>, JsError> {
    sod_hold(&signal, delta).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simulation_shapes() {
        let sim = simulate(150.0, 0.1, 3.0).unwrap();
        assert_eq!(sim.agents(), 5);
        assert_eq!(sim.times().len(), 60);
        assert_eq!(sim.xhat(4).len(), 60);
        assert!(sim.xhat(9).is_empty());
        assert_eq!(sim.x_true(0)[0], 52.0);
        assert!(sim.events() >= 5.0);
        assert!(simulate(-1.0, 0.1, 3.0).is_err());
    }

    #[test]
    fn gain_approaches_averaging_at_low_frequency() {
        let low = gain_deviation(5, 1e-6).unwrap();
        let high = gain_deviation(5, 10.0).unwrap();
        assert!(low < 1e-5 && high > 0.1);
        assert!(gain_deviation(0, 1.0).is_err());
    }

    #[test]
    fn sod_hold_tracks_within_delta() {
        let signal: Vec<f64> = (0..50).map(|k| (k as f64 * 0.3).sin()).collect();
        let held = sod_hold(&signal, 0.25).unwrap();
        for (y, h) in signal.iter().zip(&held) {
            assert!((y - h).abs() <= 0.25);
        }
        assert_eq!(held[0], signal[0]);
        assert!(sod_hold(&signal, -1.0).is_err());
    }
}
