//! Seeded ground-truth generators.
//!
//! Nothing here reads detection code: every generator emits its truth
//! alongside the data so tests can score the pipeline independently.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::classify::UserClass;
use crate::ingest::{ActionType, ActivitySeries, EventRecord};
use crate::validate::PairCausalFrame;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingDirection {
    XDrivesY,
    Independent,
}

/// Transient steps discarded before recording.
const LOGISTIC_BURN_IN: usize = 100;

/// `x' = x(3.8 − 3.8x)`, `y' = y(3.5 − 3.5y − c·x)`; `x` forces `y` when
/// `c > 0`. Initial states are drawn from `[0.1, 0.9)`.
pub fn gen_coupled_logistic(n: usize, coupling: f64, seed: u64) -> (ActivitySeries, ActivitySeries, CouplingDirection) {
    let mut r = rng(seed);
    let mut x: f64 = r.random_range(0.1..0.9);
    let mut y: f64 = r.random_range(0.1..0.9);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for step in 0..LOGISTIC_BURN_IN + n {
        if step >= LOGISTIC_BURN_IN {
            xs.push(x);
            ys.push(y);
        }
        let nx = x * (3.8 - 3.8 * x);
        let ny = y * (3.5 - 3.5 * y - coupling * x);
        x = nx;
        y = ny;
    }
    let direction = if coupling == 0.0 {
        CouplingDirection::Independent
    } else {
        CouplingDirection::XDrivesY
    };
    (
        ActivitySeries::from_values("x", nonnegative(xs)),
        ActivitySeries::from_values("y", nonnegative(ys)),
        direction,
    )
}

fn nonnegative(mut v: Vec<f64>) -> Vec<f64> {
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    if min < 0.0 {
        v.iter_mut().for_each(|x| *x -= min);
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignSpec {
    pub n_background: usize,
    /// Leader plus followers; 0 plants nothing.
    pub n_coordinated: usize,
    pub lag_bins: usize,
    pub n_bins: usize,
    pub bin_width: i64,
    pub start: i64,
    pub seed: u64,
}

impl Default for CampaignSpec {
    fn default() -> Self {
        CampaignSpec {
            n_background: 200,
            n_coordinated: 10,
            lag_bins: 1,
            n_bins: 288,
            bin_width: 300,
            start: 1_600_000_200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignTruth {
    pub leader: Option<String>,
    pub followers: Vec<String>,
    /// Directed `(leader, follower)` pairs.
    pub planted_pairs: Vec<(String, String)>,
    pub window: (i64, i64),
    pub bin_width: i64,
}

#[derive(Debug, Clone, Copy)]
enum BackgroundKind {
    Steady { rate: f64 },
    Bursty { on_rate: f64, p_on: f64, p_off: f64 },
    Diurnal { peak: f64, phase: f64 },
}

/// Probability a follower echoes a given leader event.
const ECHO_PROB: f64 = 0.85;
/// Follower timestamp jitter bound, seconds.
const ECHO_JITTER: i64 = 30;

/// Background users emit independent activity of three kinds (steady
/// Poisson, on/off bursts, daily cycle). The coordinated group has one
/// leader with independent per-bin bursts; each follower echoes leader
/// events `lag_bins` bins later with a small timestamp jitter and adds a
/// little activity of its own. User ids are shuffled so position carries
/// no signal.
pub fn gen_campaign(spec: &CampaignSpec) -> (Vec<EventRecord>, CampaignTruth) {
    let mut r = rng(spec.seed);
    let total = spec.n_background + spec.n_coordinated;
    let mut ids: Vec<String> = (0..total).map(|i| format!("user_{i:05}")).collect();
    ids.shuffle(&mut r);
    let bw = spec.bin_width;
    let end = spec.start + spec.n_bins as i64 * bw;
    let mut events = Vec::new();

    let poisson = |r: &mut ChaCha8Rng, lambda: f64| -> u64 {
        if lambda <= 0.0 {
            0
        } else {
            Poisson::new(lambda).map(|p| p.sample(r) as u64).unwrap_or(0)
        }
    };
    let emit = |events: &mut Vec<EventRecord>, user: &str, ts: i64, action: ActionType, tags: Vec<String>, sentiment: Option<f64>, target: Option<String>| {
        events.push(EventRecord {
            user_id: user.to_string(),
            timestamp: ts,
            action_type: action,
            hashtags: tags,
            sentiment,
            target_user: target,
        });
    };
    let background_action = |r: &mut ChaCha8Rng| match r.random_range(0..10) {
        0..=4 => ActionType::Post,
        5..=6 => ActionType::Retweet,
        7 => ActionType::Reply,
        8 => ActionType::Mention,
        _ => ActionType::Other,
    };

    for id in &ids[spec.n_coordinated..] {
        let kind = match r.random_range(0..3) {
            0 => BackgroundKind::Steady {
                rate: r.random_range(0.05..2.5),
            },
            1 => BackgroundKind::Bursty {
                on_rate: r.random_range(1.0..6.0),
                p_on: r.random_range(0.02..0.15),
                p_off: r.random_range(0.2..0.6),
            },
            _ => BackgroundKind::Diurnal {
                peak: r.random_range(0.5..4.0),
                phase: r.random_range(0.0..std::f64::consts::TAU),
            },
        };
        let mut on = false;
        for b in 0..spec.n_bins {
            let lambda = match kind {
                BackgroundKind::Steady { rate } => rate,
                BackgroundKind::Bursty { on_rate, p_on, p_off } => {
                    on = if on { !r.random_bool(p_off) } else { r.random_bool(p_on) };
                    if on {
                        on_rate
                    } else {
                        0.05
                    }
                }
                BackgroundKind::Diurnal { peak, phase } => {
                    let angle = std::f64::consts::TAU * b as f64 / 288.0 + phase;
                    peak * (0.5 + 0.5 * angle.sin())
                }
            };
            for _ in 0..poisson(&mut r, lambda) {
                let ts = spec.start + b as i64 * bw + r.random_range(0..bw);
                let action = background_action(&mut r);
                let tags = if r.random_bool(0.3) {
                    vec![format!("topic{}", r.random_range(0..40))]
                } else {
                    vec![]
                };
                let sentiment = Some(r.random_range(-1.0..1.0f64));
                emit(&mut events, id, ts, action, tags, sentiment, None);
            }
        }
    }

    let mut truth = CampaignTruth {
        leader: None,
        followers: Vec::new(),
        planted_pairs: Vec::new(),
        window: (spec.start, end),
        bin_width: bw,
    };
    if spec.n_coordinated > 0 {
        let leader = ids[0].clone();
        let followers: Vec<String> = ids[1..spec.n_coordinated].to_vec();
        let tag = "campaign".to_string();
        let mut leader_times = Vec::new();
        for b in 0..spec.n_bins {
            if r.random_bool(0.35) {
                let count = 1 + poisson(&mut r, 3.0);
                for _ in 0..count {
                    let ts = spec.start + b as i64 * bw + r.random_range(ECHO_JITTER..bw - ECHO_JITTER);
                    leader_times.push(ts);
                    emit(&mut events, &leader, ts, ActionType::Post, vec![tag.clone()], Some(0.6), None);
                }
            }
        }
        let lag = spec.lag_bins as i64 * bw;
        for f in &followers {
            for &ts in &leader_times {
                if r.random_bool(ECHO_PROB) {
                    let t = ts + lag + r.random_range(-ECHO_JITTER..=ECHO_JITTER);
                    if t < end {
                        emit(&mut events, f, t, ActionType::Retweet, vec![tag.clone()], Some(0.5), Some(leader.clone()));
                    }
                }
            }
            for b in 0..spec.n_bins {
                for _ in 0..poisson(&mut r, 0.1) {
                    let ts = spec.start + b as i64 * bw + r.random_range(0..bw);
                    emit(&mut events, f, ts, ActionType::Post, vec![], Some(0.2), None);
                }
            }
            truth.planted_pairs.push((leader.clone(), f.clone()));
        }
        truth.leader = Some(leader);
        truth.followers = followers;
    }
    events.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.user_id.cmp(&b.user_id)));
    (events, truth)
}

/// Background population made of `n_groups` equally sized behaviour
/// archetypes; used by the pair-scheduling benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub n_users: usize,
    pub n_groups: usize,
    pub n_bins: usize,
    pub bin_width: i64,
    pub start: i64,
    pub seed: u64,
}

impl Default for PopulationSpec {
    fn default() -> Self {
        PopulationSpec {
            n_users: 1000,
            n_groups: 10,
            n_bins: 576,
            bin_width: 300,
            start: 1_600_000_200,
            seed: 0,
        }
    }
}

/// Groups form a grid of five activity levels (`0.5 + 2·(g/2)` posts
/// per bin on average) by two styles: even groups post singly, odd groups
/// post in clumps of four within a few seconds, which separates them in
/// burstiness and variance. Users are assigned round-robin, so group
/// sizes differ by at most one. Returns the events and each user's group.
pub fn gen_population(spec: &PopulationSpec) -> (Vec<EventRecord>, Vec<(String, usize)>) {
    const CLUMP: usize = 4;
    let mut r = rng(spec.seed);
    let groups = spec.n_groups.max(1);
    let mut events = Vec::new();
    let mut membership = Vec::with_capacity(spec.n_users);
    for u in 0..spec.n_users {
        let id = format!("user_{u:05}");
        let g = u % groups;
        let level = 0.5 + 2.0 * (g / 2) as f64;
        let clump = if g % 2 == 1 { CLUMP } else { 1 };
        let sessions = Poisson::new(level / clump as f64).expect("positive rate");
        for b in 0..spec.n_bins {
            let base = spec.start + b as i64 * spec.bin_width;
            for _ in 0..sessions.sample(&mut r) as u64 {
                let t0 = base + r.random_range(0..spec.bin_width - 2 * clump as i64);
                for j in 0..clump {
                    events.push(EventRecord {
                        user_id: id.clone(),
                        timestamp: t0 + 2 * j as i64,
                        action_type: ActionType::Post,
                        hashtags: Vec::new(),
                        sentiment: None,
                        target_user: None,
                    });
                }
            }
        }
        membership.push((id, g));
    }
    events.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.user_id.cmp(&b.user_id)));
    (events, membership)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameTruth {
    pub true_effect: f64,
    pub confounding: f64,
}

/// Covariates ~ N(0, I₃); `P(treated) = sigmoid(confounding · cov₁)`;
/// `outcome = true_effect · treated + cov₁ + N(0, 1)`.
pub fn gen_causal_frame(n: usize, true_effect: f64, confounding: f64, seed: u64) -> (PairCausalFrame, FrameTruth) {
    let mut r = rng(seed);
    let mut frame = PairCausalFrame {
        source: "treatment".into(),
        target: "outcome".into(),
        bins: (0..n).collect(),
        treatment: Vec::with_capacity(n),
        outcome: Vec::with_capacity(n),
        covariates: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let cov: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut r)).collect();
        let p = 1.0 / (1.0 + (-confounding * cov[0]).exp());
        let treated = r.random_bool(p);
        let noise: f64 = StandardNormal.sample(&mut r);
        frame
            .outcome
            .push(true_effect * if treated { 1.0 } else { 0.0 } + cov[0] + noise);
        frame.treatment.push(treated);
        frame.covariates.push(cov);
    }
    (
        frame,
        FrameTruth {
            true_effect,
            confounding,
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub n: usize,
    pub dim: usize,
    /// Dimensions that carry class signal; the rest are pure noise.
    pub informative: usize,
    /// Distance of each class centre from the origin.
    pub separation: f64,
    /// Apply a seeded random rotation to the whole space, so class
    /// boundaries are oblique to every axis.
    pub rotate: bool,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        BlobSpec {
            n: 400,
            dim: 12,
            informative: 4,
            separation: 1.75,
            rotate: true,
            seed: 0,
        }
    }
}

/// Four isotropic unit-variance Gaussian classes, balanced. Class centres
/// sit at `±separation` along pairs of informative axes, before the
/// optional rotation.
pub fn gen_blobs(spec: &BlobSpec) -> (Vec<Vec<f64>>, Vec<UserClass>) {
    assert!(spec.informative >= 2 && spec.informative <= spec.dim);
    let mut r = rng(spec.seed);
    let centres: Vec<Vec<f64>> = (0..4)
        .map(|c| {
            let mut v = vec![0.0; spec.dim];
            let axis = c % 2;
            let sign = if c < 2 { 1.0 } else { -1.0 };
            v[axis] = sign * spec.separation;
            // the remaining informative axes get a small class-specific offset
            for (j, x) in v.iter_mut().enumerate().take(spec.informative).skip(2) {
                *x = if (c + j) % 2 == 0 { 0.5 } else { -0.5 } * spec.separation;
            }
            v
        })
        .collect();
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut xs: Vec<Vec<f64>> = Vec::with_capacity(spec.n);
    let mut ys = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let c = i % 4;
        xs.push(centres[c].iter().map(|m| m + noise.sample(&mut r)).collect());
        ys.push(UserClass::ALL[c]);
    }
    // shuffle jointly
    let mut order: Vec<usize> = (0..spec.n).collect();
    order.shuffle(&mut r);
    let mut xs: Vec<Vec<f64>> = order.iter().map(|&i| xs[i].clone()).collect();
    let ys = order.iter().map(|&i| ys[i]).collect();
    if spec.rotate {
        let mut rr = rng(spec.seed ^ 0x5EED_B10B);
        let g = nalgebra::DMatrix::<f64>::from_fn(spec.dim, spec.dim, |_, _| rr.sample(StandardNormal));
        let q = g.qr().q();
        for x in xs.iter_mut() {
            let v = &q * nalgebra::DVector::from_column_slice(x);
            x.copy_from_slice(v.as_slice());
        }
    }
    (xs, ys)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logistic_is_seeded_and_labelled() {
        let (x1, y1, d) = gen_coupled_logistic(400, 0.1, 3);
        let (x2, y2, _) = gen_coupled_logistic(400, 0.1, 3);
        assert_eq!(x1, x2);
        assert_eq!(y1, y2);
        assert_eq!(d, CouplingDirection::XDrivesY);
        assert_eq!(x1.len(), 400);
        assert!(x1.values.iter().chain(&y1.values).all(|v| *v >= 0.0 && v.is_finite()));
        let (x0, _, d0) = gen_coupled_logistic(400, 0.0, 3);
        assert_eq!(d0, CouplingDirection::Independent);
        // same seed, same x: the driver does not depend on coupling
        assert_eq!(x0, x1);
    }

    #[test]
    fn campaign_plants_leader_follower_pairs() {
        let spec = CampaignSpec {
            n_background: 20,
            n_coordinated: 5,
            seed: 9,
            ..Default::default()
        };
        let (events, truth) = gen_campaign(&spec);
        assert_eq!(truth.planted_pairs.len(), 4);
        let leader = truth.leader.clone().unwrap();
        assert!(truth.planted_pairs.iter().all(|(l, _)| *l == leader));
        assert!(events.iter().all(|e| e.timestamp >= truth.window.0 && e.timestamp < truth.window.1));
        let (again, _) = gen_campaign(&spec);
        assert_eq!(events, again);
    }

    #[test]
    fn campaign_without_coordination() {
        let spec = CampaignSpec {
            n_background: 10,
            n_coordinated: 0,
            ..Default::default()
        };
        let (_, truth) = gen_campaign(&spec);
        assert!(truth.planted_pairs.is_empty());
        assert!(truth.leader.is_none());
    }

    #[test]
    fn frame_is_seeded() {
        let (a, t) = gen_causal_frame(100, 2.0, 1.0, 5);
        let (b, _) = gen_causal_frame(100, 2.0, 1.0, 5);
        assert_eq!(a, b);
        assert_eq!(t.true_effect, 2.0);
        assert_eq!(a.len(), 100);
        assert_eq!(a.covariate_width(), 3);
    }

    #[test]
    fn blobs_are_balanced() {
        let (x, y) = gen_blobs(&BlobSpec {
            n: 400,
            dim: 6,
            informative: 3,
            separation: 2.0,
            rotate: false,
            seed: 1,
        });
        assert_eq!(x.len(), 400);
        for c in UserClass::ALL {
            assert_eq!(y.iter().filter(|&&v| v == c).count(), 100);
        }
    }
}
