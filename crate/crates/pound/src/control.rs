//! Networked control experiment: a discretized series RLC plant on one
//! node, a proportional controller on the other, closed through a
//! transport while a large perturbing flow competes for the channel.
//!
//! The plant is the strictly stable two-state system
//!
//! ```text
//! d/dt [i, vc] = [[-R/L, -1/L], [1/C, 0]] [i, vc] + [1/L, 0] u
//! ```
//!
//! sampled with a zero-order hold. The feedback value y = vc travels
//! plant -> controller, the command u = K (Vi - y) travels back, and
//! the plant holds the last received command when a message is late or
//! lost.

use crate::bench::FlowSpec;
use crate::netsim::{
    run_scenario_with_hooks, AppSend, LinkModel, SimError, SimHooks, TimerSpec, Topology,
    TransportKind,
};
use crate::engine::{Message, SessionConfig};

pub const FLOW_ID_Y: u16 = 100;
pub const FLOW_ID_U: u16 = 101;
pub const FLOW_ID_PERTURB: u16 = 102;

/// Continuous plant parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantParams {
    pub r_ohms: f64,
    pub l_henry: f64,
    pub c_farad: f64,
    pub sample_period_us: u64,
    pub vi_volts: f64,
    pub gain: f64,
}

impl Default for PlantParams {
    fn default() -> Self {
        PlantParams {
            r_ohms: 1.0,
            l_henry: 0.1,
            c_farad: 0.1,
            sample_period_us: 20_000,
            vi_volts: 1.0,
            gain: 1.0,
        }
    }
}

impl PlantParams {
    /// Continuous state matrix over [i, vc].
    pub fn a_matrix(&self) -> [[f64; 2]; 2] {
        [
            [-self.r_ohms / self.l_henry, -1.0 / self.l_henry],
            [1.0 / self.c_farad, 0.0],
        ]
    }

    pub fn b_vector(&self) -> [f64; 2] {
        [1.0 / self.l_henry, 0.0]
    }
}

/// Plant state: inductor current and capacitor voltage (the output).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PlantState {
    pub current_a: f64,
    pub vc_volts: f64,
}

/// Zero-order-hold discretization of the plant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscretePlant {
    pub ad: [[f64; 2]; 2],
    pub bd: [f64; 2],
}

/// Ad = exp(A T), Bd = integral of exp(A s) B ds, both read out of the
/// exponential of the augmented matrix [[A, B], [0, 0]] so a singular
/// A needs no special case.
pub fn discretize(p: &PlantParams) -> DiscretePlant {
    assert!(p.sample_period_us > 0, "sample period must be positive");
    let t = p.sample_period_us as f64 / 1e6;
    let a = p.a_matrix();
    let b = p.b_vector();
    let m = [
        [a[0][0] * t, a[0][1] * t, b[0] * t],
        [a[1][0] * t, a[1][1] * t, b[1] * t],
        [0.0, 0.0, 0.0],
    ];
    let e = expm3(m);
    DiscretePlant {
        ad: [[e[0][0], e[0][1]], [e[1][0], e[1][1]]],
        bd: [e[0][2], e[1][2]],
    }
}

/// 3x3 matrix exponential by scaling-and-squaring with a Taylor series
/// run to f64 convergence.
fn expm3(m: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let norm = m
        .iter()
        .map(|row| row.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let scale = 0.5f64.powi(squarings as i32);
    let scaled = map3(m, |x| x * scale);

    let mut result = eye3();
    let mut term = eye3();
    for k in 1..60 {
        term = mul3(term, scaled);
        term = map3(term, |x| x / k as f64);
        result = add3(result, term);
        let tnorm: f64 = term.iter().flatten().map(|x| x.abs()).sum();
        if tnorm < 1e-20 {
            break;
        }
    }
    for _ in 0..squarings {
        result = mul3(result, result);
    }
    result
}

fn eye3() -> [[f64; 3]; 3] {
    let mut m = [[0.0; 3]; 3];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

fn mul3(a: [[f64; 3]; 3], b: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn add3(a: [[f64; 3]; 3], b: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = a;
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] += b[i][j];
        }
    }
    out
}

fn map3(m: [[f64; 3]; 3], f: impl Fn(f64) -> f64) -> [[f64; 3]; 3] {
    let mut out = m;
    for row in &mut out {
        for x in row {
            *x = f(*x);
        }
    }
    out
}

/// One zero-order-hold step: x' = Ad x + Bd u.
pub fn plant_step(dp: &DiscretePlant, state: PlantState, u: f64) -> PlantState {
    let x = [state.current_a, state.vc_volts];
    PlantState {
        current_a: dp.ad[0][0] * x[0] + dp.ad[0][1] * x[1] + dp.bd[0] * u,
        vc_volts: dp.ad[1][0] * x[0] + dp.ad[1][1] * x[1] + dp.bd[1] * u,
    }
}

/// Proportional controller, u = K (vi - y).
pub fn controller_step(gain: f64, vi: f64, y: f64) -> f64 {
    gain * (vi - y)
}

/// Eigenvalue magnitudes of Ad via the characteristic polynomial of a
/// 2x2 matrix.
pub fn eigenvalue_magnitudes(ad: &[[f64; 2]; 2]) -> [f64; 2] {
    let tr = ad[0][0] + ad[1][1];
    let det = ad[0][0] * ad[1][1] - ad[0][1] * ad[1][0];
    let disc = tr * tr - 4.0 * det;
    if disc >= 0.0 {
        let s = disc.sqrt();
        [((tr + s) / 2.0).abs(), ((tr - s) / 2.0).abs()]
    } else {
        let m = det.sqrt();
        [m, m]
    }
}

/// One sampled trace point of the closed loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlSample {
    pub k: u64,
    pub time_us: u64,
    pub vc_volts: f64,
    pub u_volts: f64,
    /// Whether a fresh command arrived since the previous sample.
    pub y_received: bool,
}

/// Trace CSV: `k,time_ms,vc_volts,u_volts,y_received(0|1)`.
pub fn trace_to_csv(trace: &[ControlSample]) -> String {
    let mut out = String::from("k,time_ms,vc_volts,u_volts,y_received(0|1)\n");
    for s in trace {
        out.push_str(&format!(
            "{},{:.3},{:.6},{:.6},{}\n",
            s.k,
            s.time_us as f64 / 1000.0,
            s.vc_volts,
            s.u_volts,
            u8::from(s.y_received)
        ));
    }
    out
}

struct LoopHooks {
    dp: DiscretePlant,
    params: PlantParams,
    state: PlantState,
    held_u: f64,
    fresh_u: bool,
    k: u64,
    max_samples: u64,
    controller_node: usize,
    plant_node: usize,
    y_flow_idx: usize,
    u_flow_idx: usize,
    trace: Vec<ControlSample>,
}

impl SimHooks for LoopHooks {
    fn timers(&self) -> Vec<TimerSpec> {
        vec![TimerSpec {
            id: 0,
            node: self.plant_node,
            start_us: 0,
            period_us: self.params.sample_period_us,
        }]
    }

    fn on_timer(&mut self, now_us: u64, _id: u32) -> Vec<AppSend> {
        if self.k >= self.max_samples {
            return Vec::new();
        }
        let y = self.state.vc_volts;
        self.trace.push(ControlSample {
            k: self.k,
            time_us: now_us,
            vc_volts: y,
            u_volts: self.held_u,
            y_received: self.fresh_u,
        });
        self.k += 1;
        self.fresh_u = false;
        // Advance to the next sample instant under the held command.
        self.state = plant_step(&self.dp, self.state, self.held_u);
        vec![AppSend {
            flow_idx: self.y_flow_idx,
            payload: y.to_le_bytes().to_vec(),
        }]
    }

    fn on_deliver(&mut self, _now_us: u64, node: usize, msg: &Message) -> Vec<AppSend> {
        if msg.flow_id == FLOW_ID_Y && node == self.controller_node {
            let y = f64::from_le_bytes(msg.payload[..8].try_into().expect("8-byte y sample"));
            let u = controller_step(self.params.gain, self.params.vi_volts, y);
            return vec![AppSend {
                flow_idx: self.u_flow_idx,
                payload: u.to_le_bytes().to_vec(),
            }];
        }
        if msg.flow_id == FLOW_ID_U && node == self.plant_node {
            self.held_u = f64::from_le_bytes(msg.payload[..8].try_into().expect("8-byte command"));
            self.fresh_u = true;
        }
        Vec::new()
    }
}

/// Configuration for one closed-loop run.
#[derive(Debug, Clone, Copy)]
pub struct LoopConfig {
    pub params: PlantParams,
    pub transport: TransportKind,
    pub with_perturbing: bool,
    pub perturb_size: usize,
    pub perturb_period_us: u64,
    pub duration_us: u64,
    pub seed: u64,
    /// When set, replaces the wireless link with a practically
    /// instantaneous one: the "no network" reference of the paper.
    pub local: bool,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            params: PlantParams::default(),
            transport: TransportKind::Pound,
            with_perturbing: true,
            perturb_size: 65536,
            perturb_period_us: 200_000,
            duration_us: 5_000_000,
            seed: 1,
            local: false,
        }
    }
}

/// Runs the two-node closed loop (controller on node 0, plant on node
/// 1, perturbing flow node 1 -> node 0 competing with the feedback).
pub fn run_closed_loop(cfg: &LoopConfig) -> Result<Vec<ControlSample>, SimError> {
    let link = if cfg.local {
        LinkModel {
            rate_bps: 1_000_000_000,
            per_frame_overhead_us: 0,
            ..LinkModel::default()
        }
    } else {
        LinkModel::default()
    };
    let topo = Topology::chain(2, link);
    let session = SessionConfig {
        link_rate_bps: link.rate_bps,
        ..SessionConfig::default()
    };
    let controller_node = 0;
    let plant_node = 1;

    let mut flows = vec![
        FlowSpec {
            name: "y".into(),
            flow_id: FLOW_ID_Y,
            message_size: 8,
            period_us: cfg.params.sample_period_us,
            count: 0,
            priority: 7,
            transport: cfg.transport,
            src: plant_node,
            dst: controller_node,
            start_offset_us: 0,
        },
        FlowSpec {
            name: "u".into(),
            flow_id: FLOW_ID_U,
            message_size: 8,
            period_us: cfg.params.sample_period_us,
            count: 0,
            priority: 7,
            transport: cfg.transport,
            src: controller_node,
            dst: plant_node,
            start_offset_us: 0,
        },
    ];
    if cfg.with_perturbing {
        flows.push(FlowSpec {
            name: "perturb".into(),
            flow_id: FLOW_ID_PERTURB,
            message_size: cfg.perturb_size,
            period_us: cfg.perturb_period_us,
            count: cfg.duration_us / cfg.perturb_period_us + 1,
            priority: 1,
            transport: cfg.transport,
            src: plant_node,
            dst: controller_node,
            start_offset_us: 1_000,
        });
    }

    let mut hooks = LoopHooks {
        dp: discretize(&cfg.params),
        params: cfg.params,
        state: PlantState::default(),
        held_u: 0.0,
        fresh_u: false,
        k: 0,
        max_samples: cfg.duration_us / cfg.params.sample_period_us,
        controller_node,
        plant_node,
        y_flow_idx: 0,
        u_flow_idx: 1,
        trace: Vec::new(),
    };
    run_scenario_with_hooks(
        &topo,
        &session,
        &flows,
        cfg.duration_us + cfg.params.sample_period_us,
        cfg.seed,
        None,
        &mut hooks,
    )?;
    Ok(hooks.trace)
}

/// Largest |vc| difference between two traces, compared sample by
/// sample over the shorter length.
pub fn max_deviation_volts(a: &[ControlSample], b: &[ControlSample]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x.vc_volts - y.vc_volts).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fine-step RK4 integration of the continuous plant under a
    /// piecewise-constant input; the independent oracle for the
    /// zero-order-hold discretization.
    pub(super) fn rk4_step(a: [[f64; 2]; 2], b: [f64; 2], x: [f64; 2], u: f64, h: f64) -> [f64; 2] {
        let f = |x: [f64; 2]| {
            [
                a[0][0] * x[0] + a[0][1] * x[1] + b[0] * u,
                a[1][0] * x[0] + a[1][1] * x[1] + b[1] * u,
            ]
        };
        let k1 = f(x);
        let k2 = f([x[0] + 0.5 * h * k1[0], x[1] + 0.5 * h * k1[1]]);
        let k3 = f([x[0] + 0.5 * h * k2[0], x[1] + 0.5 * h * k2[1]]);
        let k4 = f([x[0] + h * k3[0], x[1] + h * k3[1]]);
        [
            x[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
            x[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        ]
    }

    fn integrate_period(p: &PlantParams, x: [f64; 2], u: f64) -> [f64; 2] {
        let a = p.a_matrix();
        let b = p.b_vector();
        let steps = p.sample_period_us;
        let h = 1e-6;
        let mut x = x;
        for _ in 0..steps {
            x = rk4_step(a, b, x, u, h);
        }
        x
    }

    #[test]
    fn vanishing_period_gives_identity_and_zero() {
        let p = PlantParams {
            sample_period_us: 1,
            ..PlantParams::default()
        };
        let dp = discretize(&p);
        assert!((dp.ad[0][0] - 1.0).abs() < 1e-4);
        assert!((dp.ad[1][1] - 1.0).abs() < 1e-4);
        assert!(dp.ad[0][1].abs() < 1e-4);
        assert!(dp.bd[0].abs() < 1e-4);
        assert!(dp.bd[1].abs() < 1e-7);
    }

    #[test]
    fn discretization_matches_fine_step_integration() {
        let p = PlantParams::default();
        let dp = discretize(&p);
        // Column k of [Ad | Bd] is the state after one period starting
        // from the k-th unit state / unit input.
        let cases = [
            ([1.0, 0.0], 0.0, [dp.ad[0][0], dp.ad[1][0]]),
            ([0.0, 1.0], 0.0, [dp.ad[0][1], dp.ad[1][1]]),
            ([0.0, 0.0], 1.0, [dp.bd[0], dp.bd[1]]),
        ];
        for (x0, u, expected) in cases {
            let got = integrate_period(&p, x0, u);
            assert!(
                (got[0] - expected[0]).abs() <= 1e-6 && (got[1] - expected[1]).abs() <= 1e-6,
                "oracle {got:?} vs discretization {expected:?}"
            );
        }
    }

    #[test]
    fn discrete_plant_is_strictly_stable() {
        let dp = discretize(&PlantParams::default());
        for m in eigenvalue_magnitudes(&dp.ad) {
            assert!(m < 1.0, "eigenvalue magnitude {m} not inside the unit circle");
        }
    }

    #[test]
    fn zero_state_zero_input_stays_zero() {
        let dp = discretize(&PlantParams::default());
        let s = plant_step(&dp, PlantState::default(), 0.0);
        assert_eq!(s, PlantState::default());
    }

    #[test]
    fn constant_unit_input_converges_to_unit_output() {
        // The RLC low-pass has unit DC gain: A x* + B = 0 gives vc = 1.
        let dp = discretize(&PlantParams::default());
        let mut s = PlantState::default();
        for _ in 0..5000 {
            s = plant_step(&dp, s, 1.0);
        }
        assert!((s.vc_volts - 1.0).abs() < 1e-6, "vc settled at {}", s.vc_volts);
        assert!(s.current_a.abs() < 1e-6);
    }

    #[test]
    fn impulse_response_matches_the_oracle() {
        let p = PlantParams::default();
        let dp = discretize(&p);
        // Kick the plant with one period of unit input, then let it ring.
        let mut xd = plant_step(&dp, PlantState::default(), 1.0);
        let mut xc = integrate_period(&p, [0.0, 0.0], 1.0);
        for _ in 0..100 {
            xd = plant_step(&dp, xd, 0.0);
            xc = integrate_period(&p, xc, 0.0);
        }
        assert!((xd.current_a - xc[0]).abs() < 1e-6);
        assert!((xd.vc_volts - xc[1]).abs() < 1e-6);
    }

    #[test]
    fn controller_is_proportional() {
        assert_eq!(controller_step(1.0, 1.0, 0.0), 1.0);
        assert_eq!(controller_step(1.0, 1.0, 1.0), 0.0);
        assert!((controller_step(1.0, 1.0, 0.4) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn local_loop_settles_near_half_and_matches_continuous_oracle() {
        let cfg = LoopConfig {
            with_perturbing: false,
            local: true,
            duration_us: 5_000_000,
            ..LoopConfig::default()
        };
        let trace = run_closed_loop(&cfg).unwrap();
        assert_eq!(trace.len(), 250);

        // Continuous oracle with the same event timing: the command
        // computed from y(k) arrives within the sample period, so it
        // drives the plant from sample k+1 on.
        let p = cfg.params;
        let mut x = [0.0f64, 0.0];
        let mut held = 0.0;
        let mut max_err: f64 = 0.0;
        for s in &trace {
            max_err = max_err.max((x[1] - s.vc_volts).abs());
            assert!((held - s.u_volts).abs() <= 1e-3);
            let y = x[1];
            x = integrate_period(&p, x, held);
            held = controller_step(p.gain, p.vi_volts, y);
        }
        assert!(max_err <= 1e-3, "max |vc| error vs oracle {max_err}");

        let tail = &trace[200..];
        for s in tail {
            assert!((s.vc_volts - 0.5).abs() < 0.02, "vc(k={}) = {}", s.k, s.vc_volts);
        }
        // Bounded-input safety margin.
        assert!(trace.iter().all(|s| s.vc_volts.abs() <= 2.0));
    }

    #[test]
    fn traces_are_deterministic() {
        let cfg = LoopConfig::default();
        let a = run_closed_loop(&cfg).unwrap();
        let b = run_closed_loop(&cfg).unwrap();
        assert_eq!(a, b);
    }
}
