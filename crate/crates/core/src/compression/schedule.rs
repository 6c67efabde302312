use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Head,
    Row,
    Weight,
    Distill,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Head => "head",
            Method::Row => "row",
            Method::Weight => "weight",
            Method::Distill => "distill",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "head" => Ok(Method::Head),
            "row" => Ok(Method::Row),
            "weight" => Ok(Method::Weight),
            "distill" => Ok(Method::Distill),
            other => Err(Error::InvalidConfig(format!("unknown method {other:?}"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `(prune fraction, applies while sparsity is below)`.
pub const SPARSITY_LADDER: [(f64, f64); 5] = [(0.20, 0.20), (0.10, 0.50), (0.05, 0.65), (0.025, 0.70), (0.01, 0.80)];
/// Slack when comparing sparsities against ladder boundaries, so that
/// `1 - 0.8` counts as having reached 0.2.
pub const SPARSITY_EPS: f64 = 1e-9;

/// Fraction of the remaining weights to prune next, or `None` once the
/// ladder is exhausted.
pub fn sparsity_schedule(sparsity: f64) -> Option<f64> {
    SPARSITY_LADDER
        .iter()
        .find(|&&(_, until)| sparsity < until - SPARSITY_EPS)
        .map(|&(f, _)| f)
}

/// Sparsity after each event when the ladder is followed exactly from a
/// dense model: `s' = 1 - (1 - s)(1 - f)`.
pub fn sparsity_recurrence() -> Vec<f64> {
    let mut out = Vec::new();
    let mut s = 0.0;
    while let Some(f) = sparsity_schedule(s) {
        s = 1.0 - (1.0 - s) * (1.0 - f);
        out.push(s);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateCompare {
    /// Current EMA against the EMA one window back.
    Ema,
    /// Current raw loss against the raw loss one window back.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    pub decay: f64,
    /// Ring length, current value included.
    pub window: usize,
    pub tolerance: f64,
    pub compare: GateCompare,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self::scaled(100)
    }
}

impl GateConfig {
    /// The 15k-step window divided by `scale`; decay and tolerance are not
    /// scaled.
    pub fn scaled(scale: u64) -> Self {
        Self {
            decay: 0.9998,
            window: scale_steps(15_000, scale) as usize,
            tolerance: 0.001,
            compare: GateCompare::Ema,
        }
    }
}

/// Loss-plateau tracker that decides when the next weight-pruning event may
/// run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionState {
    pub gate: GateConfig,
    pub ema_loss: Option<f64>,
    pub loss_ring: VecDeque<f64>,
    pub current_sparsity: f64,
    pub events_done: usize,
}

impl CompressionState {
    pub fn new(gate: GateConfig) -> Result<Self> {
        if gate.window == 0 || !(0.0..1.0).contains(&gate.decay) || !(gate.tolerance >= 0.0) {
            return Err(Error::InvalidConfig(format!("invalid gate {gate:?}")));
        }
        Ok(Self {
            gate,
            ema_loss: None,
            loss_ring: VecDeque::with_capacity(gate.window),
            current_sparsity: 0.0,
            events_done: 0,
        })
    }

    /// Starts a fresh window (after an event); the EMA carries over.
    pub fn reset_window(&mut self) {
        self.loss_ring.clear();
    }

    pub fn record_event(&mut self, sparsity: f64) {
        debug_assert!(sparsity + 1e-12 >= self.current_sparsity);
        self.current_sparsity = sparsity;
        self.events_done += 1;
        self.reset_window();
    }
}

/// Feeds one loss into the tracker. True iff the ring holds a full window
/// and the tracked value moved by at most the tolerance across it.
pub fn weight_prune_gate(state: &mut CompressionState, new_loss: f64) -> bool {
    let g = state.gate;
    let ema = match state.ema_loss {
        None => new_loss,
        Some(e) => g.decay * e + (1.0 - g.decay) * new_loss,
    };
    state.ema_loss = Some(ema);
    let tracked = match g.compare {
        GateCompare::Ema => ema,
        GateCompare::Raw => new_loss,
    };
    if state.loss_ring.len() == g.window {
        state.loss_ring.pop_front();
    }
    state.loss_ring.push_back(tracked);
    state.loss_ring.len() == g.window && (tracked - state.loss_ring.front().expect("non-empty")).abs() <= g.tolerance
}

/// `steps / scale`, rounded up, at least 1.
pub fn scale_steps(steps: u64, scale: u64) -> u64 {
    steps.div_ceil(scale.max(1)).max(1)
}

/// Fixed-interval stage: events every `interval_steps` while more than
/// `until_remaining` units remain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    pub interval_steps: u64,
    pub until_remaining: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub method: Method,
    /// Head / row stages, in order. Empty for weight pruning.
    pub phases: Vec<Phase>,
    /// Heads per layer or rows per layer removed by one event.
    pub units_per_event: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub gate: GateConfig,
    /// Weight pruning only: force an event when the gate has not fired after
    /// this many steps.
    pub max_wait_steps: u64,
}

impl PruneSchedule {
    /// One head per layer per event; every 25k/scale steps down to half the
    /// heads, then every 40k/scale steps down to one head per layer.
    pub fn heads(cfg: &ModelConfig, scale: u64) -> Self {
        let n_l = cfg.n_layers;
        Self {
            method: Method::Head,
            phases: vec![
                Phase {
                    interval_steps: scale_steps(25_000, scale),
                    until_remaining: n_l * (cfg.n_heads / 2).max(1),
                },
                Phase {
                    interval_steps: scale_steps(40_000, scale),
                    until_remaining: n_l,
                },
            ],
            units_per_event: 1,
            lr: 5e-5,
            batch_size: 4,
            gate: GateConfig::scaled(scale),
            max_wait_steps: 0,
        }
    }

    /// 128 rows per layer every 25k/scale steps until 512 remain, shrunk to
    /// `f_s/24` and `f_s/6` for narrower FFWs.
    pub fn rows(cfg: &ModelConfig, scale: u64) -> Self {
        let f = cfg.ffw_dim;
        let units = (f / 24).clamp(1, 128);
        if units != 128 {
            log::info!("ffw_dim {f}: row events shrunk from 128 to {units} rows");
        }
        let stop = (f / 6).clamp(1, 512);
        Self {
            method: Method::Row,
            phases: vec![Phase {
                interval_steps: scale_steps(25_000, scale),
                until_remaining: cfg.n_layers * stop,
            }],
            units_per_event: units,
            lr: 1e-5,
            batch_size: 4,
            gate: GateConfig::scaled(scale),
            max_wait_steps: 0,
        }
    }

    /// Sparsity ladder gated by the EMA plateau test.
    pub fn weights(scale: u64) -> Self {
        let gate = GateConfig::scaled(scale);
        Self {
            method: Method::Weight,
            phases: Vec::new(),
            units_per_event: 0,
            lr: 1e-5,
            batch_size: 4,
            gate,
            max_wait_steps: 20 * gate.window as u64,
        }
    }

    pub fn for_method(method: Method, cfg: &ModelConfig, scale: u64) -> Result<Self> {
        match method {
            Method::Head => Ok(Self::heads(cfg, scale)),
            Method::Row => Ok(Self::rows(cfg, scale)),
            Method::Weight => Ok(Self::weights(scale)),
            Method::Distill => Err(Error::InvalidConfig("distillation has no prune schedule".into())),
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return bad("batch size and lr must be positive".into());
        }
        match self.method {
            Method::Head | Method::Row => {
                let (total, per_layer_min) = if self.method == Method::Head {
                    (cfg.n_layers * cfg.n_heads, 0)
                } else {
                    (cfg.n_layers * cfg.ffw_dim, cfg.n_layers)
                };
                if self.units_per_event == 0 || self.phases.is_empty() {
                    return bad("structured schedule needs phases and a positive event size".into());
                }
                let mut prev = total;
                for p in &self.phases {
                    if p.interval_steps == 0 {
                        return bad("intervals must be positive".into());
                    }
                    if p.until_remaining > prev || p.until_remaining < per_layer_min {
                        return bad(format!("stop point {} unreachable", p.until_remaining));
                    }
                    prev = p.until_remaining;
                }
            }
            Method::Weight => {
                if self.max_wait_steps == 0 {
                    return bad("max_wait_steps must be positive".into());
                }
                CompressionState::new(self.gate)?;
            }
            Method::Distill => return bad("distillation has no prune schedule".into()),
        }
        Ok(())
    }

    /// Remaining-unit counts after each event of a structured schedule, with
    /// the interval that follows each event.
    pub fn plan(&self, cfg: &ModelConfig) -> Vec<(usize, u64)> {
        let (mut remaining, step) = match self.method {
            Method::Head => (cfg.n_layers * cfg.n_heads, cfg.n_layers * self.units_per_event),
            Method::Row => (cfg.n_layers * cfg.ffw_dim, cfg.n_layers * self.units_per_event),
            _ => return Vec::new(),
        };
        let mut out = Vec::new();
        for p in &self.phases {
            while remaining > p.until_remaining && remaining >= step {
                remaining -= step;
                out.push((remaining, p.interval_steps));
            }
        }
        out
    }
}

/// One prune event; a JSON-lines log of these is the replayable schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneEvent {
    /// Training step at which the event ran.
    pub step: u64,
    pub method: Method,
    /// Heads per layer, rows per layer, or fraction of remaining weights.
    pub units: f64,
    pub sparsity_after: f64,
    /// Heads, rows, or kept prunable entries left after the event.
    pub remaining: usize,
    /// Removed indices per layer.
    pub removed: Vec<Vec<usize>>,
    /// Weight pruning only: the gate had not fired within `max_wait_steps`.
    #[serde(default)]
    pub forced: bool,
}

pub fn write_event_log(path: impl AsRef<Path>, events: &[PruneEvent]) -> Result<()> {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_event_log(path: impl AsRef<Path>) -> Result<Vec<PruneEvent>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let events: Vec<PruneEvent> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<std::result::Result<_, _>>()?;
    if let Some(w) = events.windows(2).find(|w| w[1].step < w[0].step) {
        return Err(Error::UnsortedRecords {
            prev: w[0].step,
            next: w[1].step,
        });
    }
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_boundaries() {
        assert_eq!(sparsity_schedule(0.0), Some(0.20));
        assert_eq!(sparsity_schedule(0.2), Some(0.10));
        assert_eq!(sparsity_schedule(0.49), Some(0.10));
        assert_eq!(sparsity_schedule(0.5), Some(0.05));
        assert_eq!(sparsity_schedule(0.65), Some(0.025));
        assert_eq!(sparsity_schedule(0.7), Some(0.01));
        assert_eq!(sparsity_schedule(0.80), None);
        assert_eq!(sparsity_schedule(0.95), None);
    }

    #[test]
    fn recurrence_prefix_and_termination() {
        let seq = sparsity_recurrence();
        for (got, want) in seq.iter().zip([0.200, 0.280, 0.352, 0.4168]) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        assert!(seq.windows(2).all(|w| w[1] > w[0]));
        assert!(*seq.last().unwrap() >= 0.8 - SPARSITY_EPS);
        assert!(seq[seq.len() - 2] < 0.8);
    }

    #[test]
    fn base_head_plan() {
        let p = PruneSchedule::heads(&ModelConfig::base(), 100);
        let plan = p.plan(&ModelConfig::base());
        let counts: Vec<usize> = plan.iter().map(|x| x.0).collect();
        assert_eq!(counts, (1..=11).rev().map(|k| 12 * k).collect::<Vec<_>>());
        assert_eq!(plan[0].1, 250);
        // 72 reached in the 25k stage, the rest at 40k
        assert_eq!(plan[5], (72, 250));
        assert_eq!(plan[6], (60, 400));
    }

    #[test]
    fn base_and_slim_row_plans() {
        let base = ModelConfig::base();
        let p = PruneSchedule::rows(&base, 100);
        assert_eq!(p.units_per_event, 128);
        let per_layer: Vec<usize> = p.plan(&base).iter().map(|x| x.0 / 12).collect();
        assert_eq!(per_layer.len(), 20);
        let ticks: Vec<usize> = per_layer.iter().copied().skip(3).step_by(4).collect();
        assert_eq!(ticks, vec![2560, 2048, 1536, 1024, 512]);
        let slim = ModelConfig::slim();
        let p = PruneSchedule::rows(&slim, 100);
        assert_eq!(p.units_per_event, 32);
        assert_eq!(p.plan(&slim).last().unwrap().0, 12 * 128);
        p.validate(&slim).unwrap();
    }

    fn state(window: usize) -> CompressionState {
        CompressionState::new(GateConfig {
            window,
            ..GateConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn constant_loss_fires_when_window_fills() {
        let mut s = state(150);
        for step in 1..=400 {
            let fired = weight_prune_gate(&mut s, 2.5);
            assert_eq!(fired, step >= 150, "step {step}");
        }
        s.reset_window();
        assert!(!weight_prune_gate(&mut s, 2.5));
    }

    /// EMA of `L - c (t - 1)` seeded with the first loss.
    fn ema_ramp(l0: f64, c: f64, beta: f64, t: u64) -> f64 {
        let t1 = (t - 1) as f64;
        l0 - c * (t1 - beta * (1.0 - beta.powf(t1)) / (1.0 - beta))
    }

    #[test]
    fn linear_ramp_never_fires() {
        let g = GateConfig::default();
        let mut s = state(g.window);
        let (l0, c) = (50.0, 0.01);
        let w = g.window as u64;
        for t in 1..=4000u64 {
            let fired = weight_prune_gate(&mut s, l0 - c * (t - 1) as f64);
            let ema = s.ema_loss.unwrap();
            assert!((ema - ema_ramp(l0, c, g.decay, t)).abs() < 1e-9);
            if t >= w {
                let moved = ema_ramp(l0, c, g.decay, t - w + 1) - ema_ramp(l0, c, g.decay, t);
                assert!(moved > g.tolerance);
            }
            assert!(!fired, "fired at {t}");
        }
    }

    #[test]
    fn raw_comparison_flag() {
        let mut s = CompressionState::new(GateConfig {
            window: 3,
            compare: GateCompare::Raw,
            ..GateConfig::default()
        })
        .unwrap();
        assert!(!weight_prune_gate(&mut s, 1.0));
        assert!(!weight_prune_gate(&mut s, 5.0));
        assert!(weight_prune_gate(&mut s, 1.0005));
        assert!(!weight_prune_gate(&mut s, 2.0));
    }

    #[test]
    fn event_log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        let events = vec![
            PruneEvent {
                step: 10,
                method: Method::Weight,
                units: 0.2,
                sparsity_after: 0.2,
                remaining: 80,
                removed: vec![vec![1, 2], vec![]],
                forced: false,
            },
            PruneEvent {
                step: 30,
                method: Method::Weight,
                units: 0.1,
                sparsity_after: 0.28,
                remaining: 72,
                removed: vec![vec![3], vec![0]],
                forced: true,
            },
        ];
        write_event_log(&path, &events).unwrap();
        assert_eq!(read_event_log(&path).unwrap(), events);
        write_event_log(&path, &[events[1].clone(), events[0].clone()]).unwrap();
        assert!(matches!(read_event_log(&path), Err(Error::UnsortedRecords { .. })));
    }
}
