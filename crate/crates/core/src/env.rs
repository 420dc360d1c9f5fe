//! Discrete-time simulator of a UAV edge server for mobile WBAN users:
//! criticality-weighted tasks, probabilistic line-of-sight channel,
//! local/edge latency accounting, UAV motion and energy, and the MDP
//! step/reset interface.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Legal user criticality levels.
pub const USER_CRITICALITY_LEVELS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];
/// Legal sensor criticality levels.
pub const SENSOR_CRITICALITY_LEVELS: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

/// Two-level data urgency.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Urgency {
    Low,
    High,
}

impl Urgency {
    pub fn value(self) -> f64 {
        match self {
            Urgency::Low => 0.5,
            Urgency::High => 1.0,
        }
    }
}

/// Per-task tuple: criticality factors plus data load (bits) and
/// computation amount (cycles).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskSpec {
    pub user_criticality: f64,
    pub sensor_criticality: f64,
    pub urgency: Urgency,
    pub data_bits: f64,
    pub cycles: f64,
}

impl TaskSpec {
    /// Criticality index: mean of the three factors, in (0, 1].
    pub fn criticality(&self) -> f64 {
        (self.user_criticality + self.sensor_criticality + self.urgency.value()) / 3.0
    }
}

/// Mean of the three criticality factors, with domain checks.
pub fn criticality_index(phi: f64, rho: f64, alpha: f64) -> Result<f64> {
    let in_set = |x: f64, set: &[f64]| set.iter().any(|&s| (x - s).abs() < 1e-12);
    if !in_set(phi, &USER_CRITICALITY_LEVELS) {
        return Err(Error::contract(format!("user criticality {phi} not in {USER_CRITICALITY_LEVELS:?}")));
    }
    if !in_set(rho, &SENSOR_CRITICALITY_LEVELS) {
        return Err(Error::contract(format!("sensor criticality {rho} not in {SENSOR_CRITICALITY_LEVELS:?}")));
    }
    if !in_set(alpha, &[0.5, 1.0]) {
        return Err(Error::contract(format!("urgency {alpha} not in [0.5, 1.0]")));
    }
    Ok((phi + rho + alpha) / 3.0)
}

/// Row-stochastic two-state transition matrix over {low, high}.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CriticalityChain {
    pub transition: [[f64; 2]; 2],
}

impl Default for CriticalityChain {
    fn default() -> Self {
        CriticalityChain {
            transition: [[0.7, 0.3], [0.3, 0.7]],
        }
    }
}

impl CriticalityChain {
    pub fn validate(&self) -> Result<()> {
        for row in &self.transition {
            if (row[0] + row[1] - 1.0).abs() > 1e-12 || row[0] < 0.0 || row[1] < 0.0 {
                return Err(Error::contract(format!("transition row {row:?} is not a distribution")));
            }
        }
        Ok(())
    }
}

/// Sample the next urgency level from the chain row of the previous one.
pub fn step_criticality(chain: &CriticalityChain, prev: Urgency, rng: &mut ChaCha12Rng) -> Urgency {
    let row = match prev {
        Urgency::Low => chain.transition[0],
        Urgency::High => chain.transition[1],
    };
    // row = [P(next = low), P(next = high)]
    if rng.random_range(0.0..1.0) < row[0] {
        Urgency::Low
    } else {
        Urgency::High
    }
}

/// Simulator parameters. Defaults follow the reference environment table;
/// every field is overridable from scenario files.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub users: usize,
    pub tasks_per_user: usize,
    /// Episode length in slots.
    pub horizon: usize,
    /// Slot duration in seconds (movement plus offloading/compute phases).
    pub slot_seconds: f64,
    /// Flight phase within a slot, seconds.
    pub fly_seconds: f64,
    /// Offloading-and-compute budget within a slot, seconds.
    pub compute_budget: f64,
    /// UAV altitude, meters.
    pub altitude: f64,
    /// Line-of-sight probability parameters.
    pub los_a: f64,
    pub los_b: f64,
    /// Non-line-of-sight attenuation factor.
    pub nlos_attenuation: f64,
    /// Path-loss exponent.
    pub path_loss_exp: f64,
    /// Channel gain at reference distance.
    pub ref_gain: f64,
    /// Per-user bandwidth, Hz.
    pub bandwidth: f64,
    /// User transmit power, watts.
    pub tx_power: f64,
    /// Noise power at the UAV, watts.
    pub noise_power: f64,
    /// Local hub computation capability, cycles/s.
    pub local_cpu: f64,
    /// UAV edge computation capability, cycles/s.
    pub edge_cpu: f64,
    /// Effective capacitance coefficient for edge compute energy.
    pub eff_capacitance: f64,
    /// Propulsion coefficients.
    pub gamma1: f64,
    pub gamma2: f64,
    /// Battery energy, joules.
    pub battery: f64,
    /// Maximum flying speed, m/s.
    pub max_speed: f64,
    /// Speed floor used to evaluate propulsion energy when hovering.
    pub hover_speed_floor: f64,
    /// Task data load range, bits.
    pub data_bits_range: (f64, f64),
    /// Task computation range, cycles.
    pub cycles_range: (f64, f64),
    pub criticality_chain: CriticalityChain,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            users: 10,
            tasks_per_user: 5,
            horizon: 50,
            slot_seconds: 2.0,
            fly_seconds: 1.0,
            compute_budget: 1.0,
            altitude: 100.0,
            los_a: 10.0,
            los_b: 0.6,
            nlos_attenuation: 0.2,
            path_loss_exp: 2.3,
            ref_gain: 1.42e-4,
            bandwidth: 1e6,
            tx_power: 0.1,
            noise_power: 1e-9,
            local_cpu: 1e9,
            edge_cpu: 1e10,
            eff_capacitance: 1e-27,
            gamma1: 0.002,
            gamma2: 70.0,
            battery: 5e5,
            max_speed: 50.0,
            hover_speed_floor: 1.0,
            data_bits_range: (8e6, 1.6e7),
            cycles_range: (1e9, 2e9),
            criticality_chain: CriticalityChain::default(),
        }
    }
}

/// Axis-aligned operating area; the UAV is clamped to it and state vectors
/// normalize positions against it.
#[derive(Clone, Debug, PartialEq)]
pub struct Arena {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Arena {
    /// Bounding box of the traces padded by 10% per side, with a minimum
    /// extent of 20 m per axis so degenerate traces stay normalizable.
    pub fn from_traces(traces: &[Vec<[f64; 2]>]) -> Arena {
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for t in traces {
            for p in t {
                for a in 0..2 {
                    min[a] = min[a].min(p[a]);
                    max[a] = max[a].max(p[a]);
                }
            }
        }
        if !min[0].is_finite() {
            min = [0.0, 0.0];
            max = [0.0, 0.0];
        }
        for a in 0..2 {
            let extent = max[a] - min[a];
            let pad = (0.1 * extent).max((20.0 - extent).max(0.0) / 2.0);
            min[a] -= pad;
            max[a] += pad;
        }
        Arena { min, max }
    }

    pub fn clamp(&self, p: [f64; 2]) -> [f64; 2] {
        [
            p[0].clamp(self.min[0], self.max[0]),
            p[1].clamp(self.min[1], self.max[1]),
        ]
    }

    pub fn extent(&self) -> [f64; 2] {
        [self.max[0] - self.min[0], self.max[1] - self.min[1]]
    }

    /// Map a point so the arena covers [0, 1] per axis.
    pub fn normalize(&self, p: [f64; 2]) -> [f64; 2] {
        let e = self.extent();
        [(p[0] - self.min[0]) / e[0], (p[1] - self.min[1]) / e[1]]
    }
}

/// Full simulator state at the start of a slot.
#[derive(Clone, Debug)]
pub struct EnvState {
    /// Slot index, 1-based.
    pub slot: usize,
    pub user_pos: Vec<[f64; 2]>,
    pub uav_pos: [f64; 2],
    pub energy_remaining: f64,
    pub tasks: Vec<Vec<TaskSpec>>,
}

/// Control input for one slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Action {
    /// Flying speed, m/s.
    pub speed: f64,
    /// Flying direction, radians in [0, 2*pi].
    pub heading: f64,
    /// Offload flag per (user, task).
    pub offload: Vec<Vec<bool>>,
}

/// Channel quantities for one user.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelSample {
    pub elevation_deg: f64,
    pub p_los: f64,
    pub gain: f64,
}

/// Per-task accounting for one slot.
#[derive(Clone, Debug, Default)]
pub struct TaskMetrics {
    pub criticality: f64,
    pub offloaded: bool,
    pub local_cpu_share: Option<f64>,
    pub local_time: Option<f64>,
    pub rate: Option<f64>,
    pub transmit_time: Option<f64>,
    pub edge_cpu_share: Option<f64>,
    pub edge_time: Option<f64>,
    pub edge_energy: f64,
    pub total_time: f64,
    pub weighted_time: f64,
}

/// Everything a slot produced.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub slot: usize,
    pub channels: Vec<ChannelSample>,
    pub tasks: Vec<Vec<TaskMetrics>>,
    pub fly_energy: f64,
    pub edge_energy: f64,
    /// Sum over tasks of criticality-weighted completion time.
    pub weighted_completion: f64,
    pub reward: f64,
    pub energy_ok: bool,
    pub deadline_ok: bool,
}

impl StepOutcome {
    pub fn violated(&self) -> bool {
        !(self.energy_ok && self.deadline_ok)
    }
}

/// Split `total` proportionally to `weights`; the last share absorbs the
/// rounding remainder so the shares always sum to `total` exactly.
fn allocate_shares(weights: &[f64], total: f64) -> Vec<f64> {
    let sum: f64 = weights.iter().sum();
    let n = weights.len();
    let mut shares = Vec::with_capacity(n);
    let mut used = 0.0;
    for (i, w) in weights.iter().enumerate() {
        if i + 1 == n {
            shares.push(total - used);
        } else {
            let s = w * total / sum;
            shares.push(s);
            used += s;
        }
    }
    shares
}

/// Elevation angle (degrees), line-of-sight probability, and expected
/// channel gain between a ground user and the UAV.
pub fn channel_model(user: [f64; 2], uav: [f64; 2], cfg: &EnvConfig) -> ChannelSample {
    let dx = user[0] - uav[0];
    let dy = user[1] - uav[1];
    let horizontal = (dx * dx + dy * dy).sqrt();
    let elevation_deg = if horizontal == 0.0 {
        90.0
    } else {
        (cfg.altitude / horizontal).atan().to_degrees()
    };
    let p_los = 1.0 / (1.0 + cfg.los_a * (-cfg.los_b * (elevation_deg - cfg.los_a)).exp());
    let distance = (cfg.altitude * cfg.altitude + horizontal * horizontal).sqrt();
    let gain = (p_los * cfg.ref_gain + (1.0 - p_los) * cfg.nlos_attenuation * cfg.ref_gain)
        / distance.powf(cfg.path_loss_exp);
    ChannelSample {
        elevation_deg,
        p_los,
        gain,
    }
}

/// Per-task transmission rate and time for one user's offloaded tasks.
/// Returns `None` for tasks kept local; all-local users get no rates.
pub fn transmission(
    tasks: &[TaskSpec],
    offload: &[bool],
    gain: f64,
    cfg: &EnvConfig,
) -> Vec<Option<(f64, f64)>> {
    let offloaded: Vec<usize> = (0..tasks.len()).filter(|&i| offload[i]).collect();
    let mut out = vec![None; tasks.len()];
    if offloaded.is_empty() {
        return out;
    }
    let weights: Vec<f64> = offloaded.iter().map(|&i| tasks[i].criticality()).collect();
    let crit_sum: f64 = weights.iter().sum();
    let bw_shares = allocate_shares(&weights, cfg.bandwidth);
    for (k, &i) in offloaded.iter().enumerate() {
        let crit = tasks[i].criticality();
        let snr = crit * cfg.tx_power * gain / (crit_sum * cfg.noise_power);
        let rate = bw_shares[k] * (1.0 + snr).log2();
        out[i] = Some((rate, tasks[i].data_bits / rate));
    }
    out
}

/// Per-task local CPU share and latency for one user's local tasks.
pub fn local_compute(tasks: &[TaskSpec], offload: &[bool], cfg: &EnvConfig) -> Vec<Option<(f64, f64)>> {
    let local: Vec<usize> = (0..tasks.len()).filter(|&i| !offload[i]).collect();
    let mut out = vec![None; tasks.len()];
    if local.is_empty() {
        return out;
    }
    let weights: Vec<f64> = local.iter().map(|&i| tasks[i].criticality()).collect();
    let shares = allocate_shares(&weights, cfg.local_cpu);
    for (k, &i) in local.iter().enumerate() {
        out[i] = Some((shares[k], tasks[i].cycles / shares[k]));
    }
    out
}

/// Edge CPU share, compute latency, and compute energy for every offloaded
/// task across all users.
pub fn uav_compute(
    tasks: &[Vec<TaskSpec>],
    offload: &[Vec<bool>],
    cfg: &EnvConfig,
) -> Vec<Vec<Option<(f64, f64, f64)>>> {
    let mut flat: Vec<(usize, usize)> = Vec::new();
    for (u, row) in offload.iter().enumerate() {
        for (n, &z) in row.iter().enumerate() {
            if z {
                flat.push((u, n));
            }
        }
    }
    let mut out: Vec<Vec<Option<(f64, f64, f64)>>> = tasks
        .iter()
        .map(|row| vec![None; row.len()])
        .collect();
    if flat.is_empty() {
        return out;
    }
    let weights: Vec<f64> = flat.iter().map(|&(u, n)| tasks[u][n].criticality()).collect();
    let shares = allocate_shares(&weights, cfg.edge_cpu);
    for (k, &(u, n)) in flat.iter().enumerate() {
        let f = shares[k];
        let cycles = tasks[u][n].cycles;
        let energy = cfg.eff_capacitance * f * f * cycles;
        out[u][n] = Some((f, cycles / f, energy));
    }
    out
}

/// Move the UAV for one flight phase and account propulsion energy.
/// Hover energy is evaluated at the configured speed floor.
pub fn fly_and_energy(
    pos: [f64; 2],
    speed: f64,
    heading: f64,
    cfg: &EnvConfig,
    arena: &Arena,
) -> Result<([f64; 2], f64)> {
    if !(0.0..=cfg.max_speed).contains(&speed) {
        return Err(Error::contract(format!(
            "speed {speed} outside [0, {}]",
            cfg.max_speed
        )));
    }
    let new_pos = arena.clamp([
        pos[0] + speed * cfg.fly_seconds * heading.cos(),
        pos[1] + speed * cfg.fly_seconds * heading.sin(),
    ]);
    let v = speed.max(cfg.hover_speed_floor);
    let energy = (cfg.gamma1 * v * v * v + cfg.gamma2 / v) * cfg.fly_seconds;
    Ok((new_pos, energy))
}

/// The simulator. One instance is driven by one logical thread; instances
/// with distinct seeds can run concurrently.
#[derive(Clone, Debug)]
pub struct WbanEnv {
    pub cfg: EnvConfig,
    user_criticality: Vec<f64>,
    sensor_criticality: Vec<f64>,
    traces: Vec<Vec<[f64; 2]>>,
    arena: Arena,
    rng: ChaCha12Rng,
    state: EnvState,
    trace_offsets: Vec<usize>,
    observed: Vec<Vec<[f64; 2]>>,
}

impl WbanEnv {
    /// `phi` has one entry per user, `rho` one per sensor slot (shared by
    /// all users). Each user follows their own trace.
    pub fn new(
        cfg: EnvConfig,
        phi: Vec<f64>,
        rho: Vec<f64>,
        traces: Vec<Vec<[f64; 2]>>,
        seed: u64,
    ) -> Result<Self> {
        if phi.len() != cfg.users {
            return Err(Error::config(format!(
                "{} user criticalities for {} users",
                phi.len(),
                cfg.users
            )));
        }
        if rho.len() != cfg.tasks_per_user {
            return Err(Error::config(format!(
                "{} sensor criticalities for {} sensors",
                rho.len(),
                cfg.tasks_per_user
            )));
        }
        if traces.len() < cfg.users {
            return Err(Error::config(format!(
                "{} traces for {} users",
                traces.len(),
                cfg.users
            )));
        }
        for (u, t) in traces.iter().take(cfg.users).enumerate() {
            if t.len() < cfg.horizon + 1 {
                return Err(Error::config(format!(
                    "trace {u} has {} points, needs at least {}",
                    t.len(),
                    cfg.horizon + 1
                )));
            }
        }
        for &p in &phi {
            criticality_index(p, rho[0], 0.5)?;
        }
        for &r in &rho {
            criticality_index(phi[0], r, 0.5)?;
        }
        cfg.criticality_chain.validate()?;
        let traces: Vec<Vec<[f64; 2]>> = traces.into_iter().take(cfg.users).collect();
        let arena = Arena::from_traces(&traces);
        let users = cfg.users;
        let mut env = WbanEnv {
            cfg,
            user_criticality: phi,
            sensor_criticality: rho,
            traces,
            arena,
            rng: crate::rng::stream(seed, "wban-env"),
            state: EnvState {
                slot: 1,
                user_pos: vec![[0.0, 0.0]; users],
                uav_pos: [0.0, 0.0],
                energy_remaining: 0.0,
                tasks: Vec::new(),
            },
            trace_offsets: vec![0; users],
            observed: vec![Vec::new(); users],
        };
        env.reset();
        Ok(env)
    }

    pub fn arena(&self) -> &Arena {
        &self.arena
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    /// Positions observed so far in the current episode, oldest first.
    pub fn observed_positions(&self, user: usize) -> &[[f64; 2]] {
        &self.observed[user]
    }

    pub fn state_dim(&self) -> usize {
        self.cfg.users * self.cfg.tasks_per_user + 2 * self.cfg.users + 3
    }

    pub fn action_dim(&self) -> usize {
        self.cfg.users * self.cfg.tasks_per_user + 2
    }

    fn sample_task(&mut self, u: usize, n: usize, urgency: Urgency) -> TaskSpec {
        let (d_lo, d_hi) = self.cfg.data_bits_range;
        let (c_lo, c_hi) = self.cfg.cycles_range;
        TaskSpec {
            user_criticality: self.user_criticality[u],
            sensor_criticality: self.sensor_criticality[n],
            urgency,
            data_bits: self.rng.random_range(d_lo..d_hi),
            cycles: self.rng.random_range(c_lo..c_hi),
        }
    }

    /// Start a new episode: new trace offsets, fresh tasks, full battery,
    /// UAV at the geometric center of the initial user positions.
    pub fn reset(&mut self) -> &EnvState {
        let users = self.cfg.users;
        let horizon = self.cfg.horizon;
        self.trace_offsets = (0..users)
            .map(|u| {
                let max_start = self.traces[u].len() - horizon - 1;
                if max_start == 0 {
                    0
                } else {
                    self.rng.random_range(0..=max_start)
                }
            })
            .collect();
        let user_pos: Vec<[f64; 2]> = (0..users)
            .map(|u| self.traces[u][self.trace_offsets[u]])
            .collect();
        let centroid = [
            user_pos.iter().map(|p| p[0]).sum::<f64>() / users as f64,
            user_pos.iter().map(|p| p[1]).sum::<f64>() / users as f64,
        ];
        let mut tasks = Vec::with_capacity(users);
        for u in 0..users {
            let mut row = Vec::with_capacity(self.cfg.tasks_per_user);
            for n in 0..self.cfg.tasks_per_user {
                let urgency = if self.rng.random_range(0.0..1.0) < 0.5 {
                    Urgency::Low
                } else {
                    Urgency::High
                };
                row.push(self.sample_task(u, n, urgency));
            }
            tasks.push(row);
        }
        self.observed = user_pos.iter().map(|&p| vec![p]).collect();
        self.state = EnvState {
            slot: 1,
            user_pos,
            uav_pos: self.arena.clamp(centroid),
            energy_remaining: self.cfg.battery,
            tasks,
        };
        &self.state
    }

    /// Normalized observation: criticality indices, user positions, UAV
    /// position, remaining energy fraction.
    pub fn state_vector(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.state_dim());
        for row in &self.state.tasks {
            for task in row {
                out.push(task.criticality());
            }
        }
        for &p in &self.state.user_pos {
            let n = self.arena.normalize(p);
            out.push(n[0]);
            out.push(n[1]);
        }
        let n = self.arena.normalize(self.state.uav_pos);
        out.push(n[0]);
        out.push(n[1]);
        out.push(self.state.energy_remaining / self.cfg.battery);
        out
    }

    /// Advance one slot: fly, serve tasks, account energy and reward, then
    /// roll users, criticalities, and task draws forward.
    pub fn step(&mut self, action: &Action) -> Result<StepOutcome> {
        let cfg = self.cfg.clone();
        if self.state.slot > cfg.horizon {
            return Err(Error::EpisodeFinished(cfg.horizon));
        }
        if !(0.0..=std::f64::consts::TAU).contains(&action.heading) {
            return Err(Error::contract(format!(
                "heading {} outside [0, 2*pi]",
                action.heading
            )));
        }
        if action.offload.len() != cfg.users
            || action.offload.iter().any(|r| r.len() != cfg.tasks_per_user)
        {
            return Err(Error::contract("offload matrix shape mismatch".to_string()));
        }

        let (uav_pos, fly_energy) =
            fly_and_energy(self.state.uav_pos, action.speed, action.heading, &cfg, &self.arena)?;
        self.state.uav_pos = uav_pos;

        let channels: Vec<ChannelSample> = self
            .state
            .user_pos
            .iter()
            .map(|&p| channel_model(p, uav_pos, &cfg))
            .collect();

        let edge = uav_compute(&self.state.tasks, &action.offload, &cfg);
        let crit_total: f64 = self
            .state
            .tasks
            .iter()
            .flatten()
            .map(TaskSpec::criticality)
            .sum();

        let mut task_metrics: Vec<Vec<TaskMetrics>> = Vec::with_capacity(cfg.users);
        let mut edge_energy = 0.0;
        let mut weighted_completion = 0.0;
        let mut reward_sum = 0.0;
        let mut deadline_ok = true;
        for u in 0..cfg.users {
            let tasks = &self.state.tasks[u];
            let offload = &action.offload[u];
            let local = local_compute(tasks, offload, &cfg);
            let trans = transmission(tasks, offload, channels[u].gain, &cfg);
            let mut row = Vec::with_capacity(tasks.len());
            for n in 0..tasks.len() {
                let crit = tasks[n].criticality();
                let mut m = TaskMetrics {
                    criticality: crit,
                    offloaded: offload[n],
                    ..TaskMetrics::default()
                };
                if offload[n] {
                    let (rate, t_trans) = trans[n].expect("offloaded task has a rate");
                    let (share, t_comp, energy) = edge[u][n].expect("offloaded task has a share");
                    m.rate = Some(rate);
                    m.transmit_time = Some(t_trans);
                    m.edge_cpu_share = Some(share);
                    m.edge_time = Some(t_comp);
                    m.edge_energy = energy;
                    m.total_time = t_trans + t_comp;
                    edge_energy += energy;
                } else {
                    let (share, t_loc) = local[n].expect("local task has a share");
                    m.local_cpu_share = Some(share);
                    m.local_time = Some(t_loc);
                    m.total_time = t_loc;
                }
                m.weighted_time = crit / crit_total * m.total_time;
                weighted_completion += m.weighted_time;
                reward_sum += crit * (cfg.compute_budget - m.total_time);
                if m.total_time > cfg.compute_budget {
                    deadline_ok = false;
                }
                row.push(m);
            }
            task_metrics.push(row);
        }

        let energy_after = self.state.energy_remaining - (fly_energy + edge_energy);
        let energy_ok = energy_after >= 0.0;
        let reward = if energy_ok && deadline_ok { reward_sum } else { 0.0 };
        self.state.energy_remaining = energy_after;

        let outcome = StepOutcome {
            slot: self.state.slot,
            channels,
            tasks: task_metrics,
            fly_energy,
            edge_energy,
            weighted_completion,
            reward,
            energy_ok,
            deadline_ok,
        };

        // roll the world forward
        self.state.slot += 1;
        for u in 0..cfg.users {
            let pos = self.traces[u][self.trace_offsets[u] + self.state.slot - 1];
            self.state.user_pos[u] = pos;
            self.observed[u].push(pos);
        }
        for u in 0..cfg.users {
            for n in 0..cfg.tasks_per_user {
                let urgency =
                    step_criticality(&cfg.criticality_chain, self.state.tasks[u][n].urgency, &mut self.rng);
                self.state.tasks[u][n] = self.sample_task(u, n, urgency);
            }
        }
        Ok(outcome)
    }
}
