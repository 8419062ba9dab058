//! Monte Carlo model of the heralded-pair free-space link: pair source,
//! static losses, turbulence-dependent coupling, modal crosstalk,
//! coincidence logic with accidentals, the idler-as-target correction, and
//! detection-matrix assembly.
//!
//! # Channel model
//!
//! Both photons of a pair co-propagate through the link, so one transverse
//! wander displacement Δ is drawn per bin and applied to both arms:
//! coupling η_t = exp(−Δ²/w_c²) multiplies each arm's singles once and
//! coincidences twice. Higher-order (tilt-removed) wavefront error couples
//! the ±ℓ OAM modes; its ensemble-averaged keep/flip probabilities degrade
//! the Born probability of each (sent, projector) pair. The projection
//! filters signal singles, so accidentals follow the measured singles
//! product — a constant detector background is the only outcome-blind term.
//! One wander sample per 200 ms bin understates intra-bin averaging
//! (turbulence decorrelates in milliseconds); matrix-level statistics are
//! insensitive to this and it keeps bins independent.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::mubs::MubSet;
use crate::protocol::{DetectionMatrix, Provenance};
use crate::spinorbit::{ModeIndex, StateVector};
use crate::turbulence::{crosstalk_matrix, ring_mode, ScreenGenerator, TurbulenceParams};
use crate::{Error, Result};

/// Static link parameters. Singles rates are source-referred: the dB
/// losses map them to the in-link detected rates.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LinkBudget {
    pub signal_loss_db: f64,
    pub idler_loss_db: f64,
    /// Pair (coincidence) rate at the source, Hz.
    pub source_coincidence_rate_hz: f64,
    pub signal_singles_rate_hz: f64,
    pub idler_singles_rate_hz: f64,
    pub coincidence_window_s: f64,
    /// Outcome-blind detector background (dark + stray), Hz per detector.
    pub background_rate_hz: f64,
    /// Wander-coupling waist w_c in η = exp(−Δ²/w_c²), meters.
    pub coupling_waist_m: f64,
    pub bin_duration_s: f64,
}

impl LinkBudget {
    pub fn new(
        signal_loss_db: f64,
        idler_loss_db: f64,
        source_coincidence_rate_hz: f64,
        signal_singles_rate_hz: f64,
        idler_singles_rate_hz: f64,
        coincidence_window_s: f64,
        background_rate_hz: f64,
        coupling_waist_m: f64,
        bin_duration_s: f64,
    ) -> Result<Self> {
        for (name, v) in [
            ("signal_loss_db", signal_loss_db),
            ("idler_loss_db", idler_loss_db),
            ("source_coincidence_rate_hz", source_coincidence_rate_hz),
            ("signal_singles_rate_hz", signal_singles_rate_hz),
            ("idler_singles_rate_hz", idler_singles_rate_hz),
            ("background_rate_hz", background_rate_hz),
        ] {
            if !(v >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        for (name, v) in [
            ("coincidence_window_s", coincidence_window_s),
            ("coupling_waist_m", coupling_waist_m),
            ("bin_duration_s", bin_duration_s),
        ] {
            if !(v > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        Ok(LinkBudget {
            signal_loss_db,
            idler_loss_db,
            source_coincidence_rate_hz,
            signal_singles_rate_hz,
            idler_singles_rate_hz,
            coincidence_window_s,
            background_rate_hz,
            coupling_waist_m,
            bin_duration_s,
        })
    }

    /// The published 300 m link: 7 dB / 6 dB static losses, a 1 MHz pair
    /// source with 4 MHz / 10 MHz singles, 5 ns coincidence window.
    /// Background and coupling waist are calibration choices: 20 kHz keeps
    /// the clean-air error rate near the lab floor, and a 1 mm waist makes
    /// the strongest published turbulence produce deep coupling dips.
    pub fn paper_default() -> Self {
        LinkBudget {
            signal_loss_db: 7.0,
            idler_loss_db: 6.0,
            source_coincidence_rate_hz: 1.0e6,
            signal_singles_rate_hz: 4.0e6,
            idler_singles_rate_hz: 10.0e6,
            coincidence_window_s: 5.0e-9,
            background_rate_hz: 20.0e3,
            coupling_waist_m: 1.0e-3,
            bin_duration_s: 0.2,
        }
    }

    pub fn signal_efficiency(&self) -> f64 {
        10f64.powf(-self.signal_loss_db / 10.0)
    }

    pub fn idler_efficiency(&self) -> f64 {
        10f64.powf(-self.idler_loss_db / 10.0)
    }
}

/// Accidental coincidence rate r_s · r_i · τ of two uncorrelated detectors.
pub fn accidental_rate(r_signal_hz: f64, r_idler_hz: f64, window_s: f64) -> Result<f64> {
    if r_signal_hz < 0.0 || r_idler_hz < 0.0 || window_s < 0.0 {
        return Err(Error::InvalidArgument(
            "accidental rate needs non-negative rates and window".into(),
        ));
    }
    Ok(r_signal_hz * r_idler_hz * window_s)
}

/// Turbulent-channel state shared across a run: wander statistics plus the
/// ensemble-averaged OAM keep/flip probabilities of the ±ℓ pair.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TurbulentChannel {
    params: TurbulenceParams,
    ell: i32,
    p_keep: f64,
    p_flip: f64,
}

impl TurbulentChannel {
    /// Derives the crosstalk probabilities from a fresh phase-screen
    /// ensemble (tilt removed — wander is handled by the coupling model,
    /// counting it again here would double-book it).
    pub fn from_screens(
        params: TurbulenceParams,
        ell: i32,
        screens: usize,
        seed: u64,
    ) -> Result<Self> {
        if ell <= 0 {
            return Err(Error::InvalidArgument(format!(
                "OAM order must be positive, got {ell}"
            )));
        }
        if screens == 0 {
            return Err(Error::InvalidArgument(
                "need at least one screen for crosstalk".into(),
            ));
        }
        let r0 = params.fried_r0_m()?;
        const PITCH: f64 = 2.0e-3;
        const MODE_WAIST: f64 = 0.02;
        // Cover the structure-function validity range and the mode.
        let min_extent = (3.0 * r0).max(0.5);
        let mut n = 64usize;
        while (n as f64) * PITCH < min_extent {
            n *= 2;
        }
        let gen = ScreenGenerator::new(r0, n, PITCH)?;
        let ensemble: Vec<_> = gen
            .generate_ensemble(screens, seed)
            .into_iter()
            .map(|s| s.remove_tilt())
            .collect();
        let modes = [
            ring_mode(ell, MODE_WAIST, n, PITCH)?,
            ring_mode(-ell, MODE_WAIST, n, PITCH)?,
        ];
        let c = crosstalk_matrix(&modes, &ensemble, None)?;
        let p_keep = 0.5 * (c[(0, 0)] + c[(1, 1)]);
        let p_flip = 0.5 * (c[(0, 1)] + c[(1, 0)]);
        Self::with_crosstalk(params, ell, p_keep, p_flip)
    }

    /// Builds a channel with externally supplied crosstalk probabilities
    /// (reusing a previously computed ensemble, or testing).
    pub fn with_crosstalk(
        params: TurbulenceParams,
        ell: i32,
        p_keep: f64,
        p_flip: f64,
    ) -> Result<Self> {
        if ell <= 0 {
            return Err(Error::InvalidArgument(format!(
                "OAM order must be positive, got {ell}"
            )));
        }
        if !(0.0..=1.0).contains(&p_keep)
            || !(0.0..=1.0).contains(&p_flip)
            || p_keep + p_flip > 1.0 + 1e-9
        {
            return Err(Error::InvalidArgument(format!(
                "keep/flip probabilities ({p_keep}, {p_flip}) must be in [0,1] and sum ≤ 1"
            )));
        }
        Ok(TurbulentChannel {
            params,
            ell,
            p_keep,
            p_flip,
        })
    }

    pub fn params(&self) -> &TurbulenceParams {
        &self.params
    }

    pub fn ell(&self) -> i32 {
        self.ell
    }

    pub fn p_keep(&self) -> f64 {
        self.p_keep
    }

    pub fn p_flip(&self) -> f64 {
        self.p_flip
    }
}

/// One accumulation bin of one (sent, projector) setting. Raw simulated
/// records satisfy coincidences ≤ min(singles) by construction; corrected
/// records carry reweighted (non-integer) coincidence estimates.
#[derive(Debug, Clone, Serialize)]
pub struct CountRecord {
    pub bin_duration_s: f64,
    pub coincidences: f64,
    pub signal_singles: u64,
    pub idler_singles: u64,
    pub sent_basis: usize,
    pub sent_index: usize,
    pub proj_basis: usize,
    pub proj_index: usize,
    pub sent_label: String,
    pub proj_label: String,
}

/// The same state with every OAM sign reversed (polarization untouched).
fn flip_oam(state: &StateVector) -> Result<StateVector> {
    let basis: Vec<ModeIndex> = state
        .basis()
        .iter()
        .map(|m| ModeIndex::new(m.pol, -m.oam))
        .collect();
    StateVector::new(basis, state.amps().iter().copied().collect())
}

/// Crosstalk-degraded Born probability for one setting.
fn effective_probability(
    sent: &StateVector,
    projector: &StateVector,
    channel: Option<&TurbulentChannel>,
) -> Result<f64> {
    let direct = projector.fidelity(sent);
    match channel {
        None => Ok(direct),
        Some(ch) => {
            let flipped = flip_oam(sent)?;
            Ok(ch.p_keep() * direct + ch.p_flip() * projector.fidelity(&flipped))
        }
    }
}

fn poisson_draw(rng: &mut impl Rng, mean: f64) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    Poisson::new(mean).expect("positive finite mean").sample(rng)
}

/// Mean detection rates of one setting at a given coupling efficiency.
struct BinRates {
    true_coincidence: f64,
    accidental: f64,
    signal_singles: f64,
    idler_singles: f64,
}

fn bin_rates(p_eff: f64, eta_t: f64, budget: &LinkBudget) -> BinRates {
    let eta_s = budget.signal_efficiency();
    let eta_i = budget.idler_efficiency();
    let b = budget.background_rate_hz;
    // The projection filters every signal photon; the idler is detected
    // unprojected (bucket detector), which is what makes it a usable
    // transmission gauge.
    let signal_singles = budget.signal_singles_rate_hz * eta_s * eta_t * p_eff + b;
    let idler_singles = budget.idler_singles_rate_hz * eta_i * eta_t + b;
    let true_coincidence =
        budget.source_coincidence_rate_hz * eta_s * eta_i * eta_t * eta_t * p_eff;
    let accidental = signal_singles * idler_singles * budget.coincidence_window_s;
    BinRates {
        true_coincidence,
        accidental,
        signal_singles,
        idler_singles,
    }
}

/// Simulates one accumulation bin: one shared wander draw, Poisson counts.
/// Shared-event bookkeeping keeps coincidences ≤ min(singles) exactly.
pub fn simulate_bin(
    sent: &StateVector,
    projector: &StateVector,
    budget: &LinkBudget,
    channel: Option<&TurbulentChannel>,
    rng: &mut impl Rng,
) -> Result<CountRecord> {
    let p_eff = effective_probability(sent, projector, channel)?;
    simulate_bin_with_probability(p_eff, budget, channel, rng, CountLabels::default())
}

#[derive(Default, Clone)]
struct CountLabels {
    sent_basis: usize,
    sent_index: usize,
    proj_basis: usize,
    proj_index: usize,
    sent_label: String,
    proj_label: String,
}

fn simulate_bin_with_probability(
    p_eff: f64,
    budget: &LinkBudget,
    channel: Option<&TurbulentChannel>,
    rng: &mut impl Rng,
    labels: CountLabels,
) -> Result<CountRecord> {
    // One transverse displacement per bin, shared by the co-axial pair.
    let eta_t = match channel {
        None => 1.0,
        Some(ch) => {
            let sigma_axis = (ch.params().wander_sigma2_m2() / 2.0).sqrt();
            let dx: f64 = rng.sample::<f64, _>(StandardNormal) * sigma_axis;
            let dy: f64 = rng.sample::<f64, _>(StandardNormal) * sigma_axis;
            let w = budget.coupling_waist_m;
            (-(dx * dx + dy * dy) / (w * w)).exp()
        }
    };
    let rates = bin_rates(p_eff, eta_t, budget);
    let t = budget.bin_duration_s;
    let shared = poisson_draw(rng, (rates.true_coincidence + rates.accidental) * t);
    let sig_extra = poisson_draw(
        rng,
        (rates.signal_singles - rates.true_coincidence - rates.accidental).max(0.0) * t,
    );
    let idl_extra = poisson_draw(
        rng,
        (rates.idler_singles - rates.true_coincidence - rates.accidental).max(0.0) * t,
    );
    Ok(CountRecord {
        bin_duration_s: t,
        coincidences: shared,
        signal_singles: (shared + sig_extra) as u64,
        idler_singles: (shared + idl_extra) as u64,
        sent_basis: labels.sent_basis,
        sent_index: labels.sent_index,
        proj_basis: labels.proj_basis,
        proj_index: labels.proj_index,
        sent_label: labels.sent_label,
        proj_label: labels.proj_label,
    })
}

/// Runs the full settings grid: every (sent, projector) pair across both
/// bases, `bins_per_setting` bins each. Settings simulate in parallel;
/// every (setting, bin) derives its own rng stream, so the output is
/// identical for any thread count.
pub fn run_protocol(
    mubs: &MubSet,
    budget: &LinkBudget,
    channel: Option<&TurbulentChannel>,
    bins_per_setting: usize,
    seed: u64,
) -> Result<Vec<CountRecord>> {
    if bins_per_setting == 0 {
        return Err(Error::InvalidArgument(
            "need at least one bin per setting".into(),
        ));
    }
    let d = mubs.d();
    let mut settings = Vec::with_capacity(4 * d * d);
    for sent_basis in 0..2 {
        for sent_index in 0..d {
            for proj_basis in 0..2 {
                for proj_index in 0..d {
                    let sent = mubs.state(sent_basis, sent_index)?;
                    let proj = mubs.state(proj_basis, proj_index)?;
                    let p_eff = effective_probability(sent, proj, channel)?;
                    settings.push((
                        p_eff,
                        CountLabels {
                            sent_basis,
                            sent_index,
                            proj_basis,
                            proj_index,
                            sent_label: mubs.label(sent_basis, sent_index).to_string(),
                            proj_label: mubs.label(proj_basis, proj_index).to_string(),
                        },
                    ));
                }
            }
        }
    }
    let nested: Vec<Vec<CountRecord>> = settings
        .par_iter()
        .enumerate()
        .map(|(si, (p_eff, labels))| {
            (0..bins_per_setting)
                .map(|bi| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream((si * bins_per_setting + bi) as u64);
                    simulate_bin_with_probability(
                        *p_eff,
                        budget,
                        channel,
                        &mut rng,
                        labels.clone(),
                    )
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(nested.into_iter().flatten().collect())
}

/// What to do with surviving bins after the dip floor is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CorrectionPolicy {
    /// Weight each bin's coincidences by its measured transmission
    /// (bin idler singles / setting median). Down-weighting low-idler bins
    /// is the direction that suppresses dip-induced bias — the opposite
    /// direction provably amplifies it, because dip bins are
    /// background-enriched.
    Reweight,
    /// Only discard bins below the floor.
    DiscardOnly,
}

/// Idler-singles floor below which a bin is considered a dropout, as a
/// fraction of the setting median.
pub const DIP_FLOOR_FRACTION: f64 = 0.2;

/// The idler-as-target correction: within each setting, bins whose idler
/// singles fall below 20% of the setting median are discarded, and the
/// rest are optionally transmission-weighted.
pub fn target_correction(
    records: &[CountRecord],
    policy: CorrectionPolicy,
) -> Result<Vec<CountRecord>> {
    if records.is_empty() {
        return Err(Error::InvalidArgument(
            "target correction needs records".into(),
        ));
    }
    use std::collections::BTreeMap;
    let mut groups: BTreeMap<(usize, usize, usize, usize), Vec<&CountRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.sent_basis, r.sent_index, r.proj_basis, r.proj_index))
            .or_default()
            .push(r);
    }
    let mut out = Vec::with_capacity(records.len());
    for (key, group) in groups {
        let mut idlers: Vec<u64> = group.iter().map(|r| r.idler_singles).collect();
        idlers.sort_unstable();
        let median = if idlers.len() % 2 == 1 {
            idlers[idlers.len() / 2] as f64
        } else {
            (idlers[idlers.len() / 2 - 1] + idlers[idlers.len() / 2]) as f64 / 2.0
        };
        let floor = DIP_FLOOR_FRACTION * median;
        let mut kept = 0usize;
        for r in &group {
            if (r.idler_singles as f64) < floor || median == 0.0 {
                continue;
            }
            kept += 1;
            let mut c = (*r).clone();
            if policy == CorrectionPolicy::Reweight {
                c.coincidences *= r.idler_singles as f64 / median;
            }
            out.push(c);
        }
        if kept == 0 {
            return Err(Error::Convergence(format!(
                "target correction discarded every bin of setting {key:?}: \
                 turbulence too severe for correction"
            )));
        }
    }
    Ok(out)
}

/// Averages records per setting and block-normalizes into a
/// [`DetectionMatrix`] (rows: sent states, columns: projectors, both in
/// the basis-0-then-basis-1 order of `mubs`).
pub fn build_detection_matrix(
    records: &[CountRecord],
    mubs: &MubSet,
    provenance: Provenance,
) -> Result<DetectionMatrix> {
    let d = mubs.d();
    let side = 2 * d;
    let mut sums = vec![0.0f64; side * side];
    let mut counts = vec![0usize; side * side];
    for r in records {
        if r.sent_basis > 1 || r.proj_basis > 1 || r.sent_index >= d || r.proj_index >= d {
            return Err(Error::InvalidArgument(format!(
                "record ({}, {}) → ({}, {}) outside the d = {d} grid",
                r.sent_basis, r.sent_index, r.proj_basis, r.proj_index
            )));
        }
        let row = r.sent_basis * d + r.sent_index;
        let col = r.proj_basis * d + r.proj_index;
        sums[row * side + col] += r.coincidences;
        counts[row * side + col] += 1;
    }
    let mut probs = nalgebra::DMatrix::<f64>::zeros(side, side);
    for row in 0..side {
        for col in 0..side {
            let n = counts[row * side + col];
            if n == 0 {
                return Err(Error::InvalidArgument(format!(
                    "no records for setting row {row}, column {col}"
                )));
            }
            probs[(row, col)] = sums[row * side + col] / n as f64;
        }
    }
    for row in 0..side {
        for block in 0..2 {
            let sum: f64 = (0..d).map(|j| probs[(row, block * d + j)]).sum();
            if sum <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "row {row} block {block} has no coincidences to normalize"
                )));
            }
            for j in 0..d {
                probs[(row, block * d + j)] /= sum;
            }
        }
    }
    let labels: Vec<String> = (0..2)
        .flat_map(|b| (0..d).map(move |i| (b, i)))
        .map(|(b, i)| mubs.label(b, i).to_string())
        .collect();
    DetectionMatrix::new(d, labels.clone(), labels, probs, provenance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mubs::{mub_d2, mub_d4};
    use crate::protocol::qber;
    use approx::assert_abs_diff_eq;

    const LINK: f64 = 300.0;
    const LAMBDA: f64 = 850e-9;
    const WAIST: f64 = 0.012;

    fn strong_turbulence() -> TurbulenceParams {
        TurbulenceParams::new(2.5e-15, LINK, LAMBDA, WAIST).unwrap()
    }

    fn strong_channel() -> TurbulentChannel {
        TurbulentChannel::with_crosstalk(strong_turbulence(), 2, 0.995, 0.004).unwrap()
    }

    #[test]
    fn accidental_rate_matches_published_numbers() {
        let a = accidental_rate(4.0e6, 10.0e6, 5.0e-9).unwrap();
        assert_abs_diff_eq!(a, 0.2e6, epsilon = 1e-9);
        let b = accidental_rate(0.75e6, 2.5e6, 5.0e-9).unwrap();
        assert_abs_diff_eq!(b, 9.375e3, epsilon = 1e-9);
        assert_eq!(accidental_rate(4.0e6, 10.0e6, 0.0).unwrap(), 0.0);
        assert!(accidental_rate(-1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn budget_efficiencies_match_quoted_couplings() {
        let b = LinkBudget::paper_default();
        // 7 dB ≈ 20%, 6 dB ≈ 25%.
        assert!((b.signal_efficiency() - 0.1995).abs() < 1e-3);
        assert!((b.idler_efficiency() - 0.2512).abs() < 1e-3);
    }

    #[test]
    fn clean_link_hits_the_expected_coincidence_rate() {
        // Source pairs through both losses land near 50 kHz.
        let mubs = mub_d4(2).unwrap();
        let budget = LinkBudget::paper_default();
        let sent = mubs.state(0, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut total = 0.0;
        let bins = 40;
        for _ in 0..bins {
            let rec = simulate_bin(sent, sent, &budget, None, &mut rng).unwrap();
            total += rec.coincidences;
        }
        let rate = total / (bins as f64 * budget.bin_duration_s);
        assert!(
            (25.0e3..75.0e3).contains(&rate),
            "diagonal coincidence rate {rate} Hz"
        );
    }

    #[test]
    fn orthogonal_projector_sees_only_background_accidentals() {
        let mubs = mub_d4(2).unwrap();
        let budget = LinkBudget::paper_default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut total = 0.0;
        for _ in 0..40 {
            let rec = simulate_bin(
                mubs.state(0, 0).unwrap(),
                mubs.state(0, 1).unwrap(),
                &budget,
                None,
                &mut rng,
            )
            .unwrap();
            total += rec.coincidences;
        }
        let rate = total / (40.0 * budget.bin_duration_s);
        let floor = budget.background_rate_hz
            * budget.idler_singles_rate_hz
            * budget.idler_efficiency()
            * budget.coincidence_window_s;
        assert!(
            rate < 3.0 * floor,
            "orthogonal rate {rate} Hz vs background floor {floor} Hz"
        );
    }

    #[test]
    fn coincidences_never_exceed_singles() {
        let mubs = mub_d2(1).unwrap();
        let budget = LinkBudget::paper_default();
        let ch = TurbulentChannel::with_crosstalk(strong_turbulence(), 1, 0.99, 0.0).unwrap();
        let records = run_protocol(&mubs, &budget, Some(&ch), 30, 7).unwrap();
        assert_eq!(records.len(), 4 * 4 * 30);
        for r in &records {
            let c = r.coincidences as u64;
            assert!(c <= r.signal_singles.min(r.idler_singles));
        }
    }

    #[test]
    fn coincidence_counts_are_poisson() {
        let mubs = mub_d4(2).unwrap();
        let budget = LinkBudget::paper_default();
        let sent = mubs.state(1, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1000;
        let counts: Vec<f64> = (0..n)
            .map(|_| {
                simulate_bin(sent, sent, &budget, None, &mut rng)
                    .unwrap()
                    .coincidences
            })
            .collect();
        let mean = counts.iter().sum::<f64>() / n as f64;
        let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let ratio = var / mean;
        assert!(
            (0.8..1.2).contains(&ratio),
            "variance/mean = {ratio} at mean {mean}"
        );
    }

    #[test]
    fn protocol_is_deterministic_and_thread_independent() {
        let mubs = mub_d2(1).unwrap();
        let budget = LinkBudget::paper_default();
        let a = run_protocol(&mubs, &budget, Some(&strong_channel()), 10, 42).unwrap();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let b = pool
            .install(|| run_protocol(&mubs, &budget, Some(&strong_channel()), 10, 42))
            .unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.coincidences, y.coincidences);
            assert_eq!(x.signal_singles, y.signal_singles);
            assert_eq!(x.idler_singles, y.idler_singles);
        }
    }

    #[test]
    fn clean_d4_matrix_reaches_lab_error_floor() {
        let mubs = mub_d4(2).unwrap();
        let budget = LinkBudget::paper_default();
        let records = run_protocol(&mubs, &budget, None, 20, 5).unwrap();
        let matrix = build_detection_matrix(&records, &mubs, Provenance::Simulated).unwrap();
        let report = qber(&matrix);
        assert!(
            report.q <= 0.02,
            "clean-link error rate {} above the lab bound",
            report.q
        );
        assert!(report.q > 0.0, "accidentals should leave a nonzero floor");
    }

    #[test]
    fn turbulence_raises_qber_monotonically() {
        let mubs = mub_d4(2).unwrap();
        let budget = LinkBudget::paper_default();
        let mut prev = -1.0;
        for cn2 in [2.5e-16, 1.0e-15, 2.5e-15] {
            let params = TurbulenceParams::new(cn2, LINK, LAMBDA, WAIST).unwrap();
            let ch = TurbulentChannel::with_crosstalk(params, 2, 0.995, 0.004).unwrap();
            let records = run_protocol(&mubs, &budget, Some(&ch), 20, 9).unwrap();
            let matrix = build_detection_matrix(&records, &mubs, Provenance::Simulated).unwrap();
            let q = qber(&matrix).q;
            assert!(
                q >= prev - 2e-3,
                "error rate {q} fell as turbulence strengthened (prev {prev})"
            );
            prev = q;
        }
    }

    #[test]
    fn constant_idler_correction_is_identity() {
        let mubs = mub_d2(1).unwrap();
        let budget = LinkBudget::paper_default();
        let records = run_protocol(&mubs, &budget, None, 15, 3).unwrap();
        // No turbulence → idler singles fluctuate only by Poisson noise,
        // well above the 20% floor; reweighting is then a near-identity.
        let corrected = target_correction(&records, CorrectionPolicy::DiscardOnly).unwrap();
        assert_eq!(corrected.len(), records.len());
        for (a, b) in records.iter().zip(&corrected) {
            assert_eq!(a.coincidences, b.coincidences);
        }
    }

    #[test]
    fn dropout_bins_are_discarded() {
        let mubs = mub_d2(1).unwrap();
        let budget = LinkBudget::paper_default();
        let mut records = run_protocol(&mubs, &budget, None, 15, 3).unwrap();
        records[0].idler_singles = 0;
        let corrected = target_correction(&records, CorrectionPolicy::DiscardOnly).unwrap();
        assert_eq!(corrected.len(), records.len() - 1);
    }

    #[test]
    fn fully_dropped_setting_is_an_error() {
        let mubs = mub_d2(1).unwrap();
        let budget = LinkBudget::paper_default();
        let mut records = run_protocol(&mubs, &budget, None, 5, 3).unwrap();
        for r in records.iter_mut().take(5) {
            // All bins of the first setting share (basis, index) keys.
            r.idler_singles = 0;
        }
        let err = target_correction(&records, CorrectionPolicy::Reweight);
        assert!(matches!(err, Err(Error::Convergence(_))));
    }

    #[test]
    fn correction_reduces_qber_under_correlated_dips() {
        let mubs = mub_d4(2).unwrap();
        let budget = LinkBudget::paper_default();
        let ch = strong_channel();
        let mut raw_sum = 0.0;
        let mut cor_sum = 0.0;
        for seed in 0..6 {
            let records = run_protocol(&mubs, &budget, Some(&ch), 30, seed).unwrap();
            let raw = build_detection_matrix(&records, &mubs, Provenance::Simulated).unwrap();
            let corrected = target_correction(&records, CorrectionPolicy::Reweight).unwrap();
            let cor =
                build_detection_matrix(&corrected, &mubs, Provenance::TargetCorrected).unwrap();
            raw_sum += qber(&raw).q;
            cor_sum += qber(&cor).q;
        }
        assert!(
            cor_sum <= raw_sum,
            "corrected mean error rate {cor_sum} above raw {raw_sum}"
        );
    }

    #[test]
    fn matrix_is_permutation_equivariant() {
        let mubs = mub_d2(1).unwrap();
        let budget = LinkBudget::paper_default();
        let records = run_protocol(&mubs, &budget, None, 10, 13).unwrap();
        let base = build_detection_matrix(&records, &mubs, Provenance::Simulated).unwrap();
        // Swap basis-0 states 0 and 1 in every record (sent and projector).
        let swapped: Vec<CountRecord> = records
            .iter()
            .map(|r| {
                let mut c = r.clone();
                if c.sent_basis == 0 {
                    c.sent_index = 1 - c.sent_index;
                }
                if c.proj_basis == 0 {
                    c.proj_index = 1 - c.proj_index;
                }
                c
            })
            .collect();
        let perm = build_detection_matrix(&swapped, &mubs, Provenance::Simulated).unwrap();
        for row in 0..4 {
            for col in 0..4 {
                let prow = if row < 2 { 1 - row } else { row };
                let pcol = if col < 2 { 1 - col } else { col };
                assert_abs_diff_eq!(
                    base.probs()[(row, col)],
                    perm.probs()[(prow, pcol)],
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn missing_setting_is_an_error() {
        let mubs = mub_d2(1).unwrap();
        let budget = LinkBudget::paper_default();
        let records = run_protocol(&mubs, &budget, None, 5, 1).unwrap();
        let partial: Vec<CountRecord> = records
            .into_iter()
            .filter(|r| !(r.sent_basis == 0 && r.sent_index == 0 && r.proj_basis == 1))
            .collect();
        assert!(build_detection_matrix(&partial, &mubs, Provenance::Simulated).is_err());
    }

    #[test]
    fn oam_flip_lands_in_the_flipped_basis_state() {
        let mubs = mub_d4(2).unwrap();
        // Basis 0 states are single spin-orbit modes: flipping the OAM
        // sign maps each onto another basis state, never onto itself.
        for i in 0..4 {
            let s = mubs.state(0, i).unwrap();
            let f = flip_oam(s).unwrap();
            assert_abs_diff_eq!(s.fidelity(&f), 0.0, epsilon = 1e-12);
            let total: f64 = (0..4)
                .map(|j| mubs.state(0, j).unwrap().fidelity(&f))
                .sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn d2_oam_flip_exits_the_detection_span() {
        let mubs = mub_d2(1).unwrap();
        for i in 0..2 {
            let f = flip_oam(mubs.state(0, i).unwrap()).unwrap();
            for b in 0..2 {
                for j in 0..2 {
                    assert!(mubs.state(b, j).unwrap().fidelity(&f) < 1e-12);
                }
            }
        }
    }

    #[test]
    fn channel_from_screens_is_physical() {
        let params = strong_turbulence();
        let ch = TurbulentChannel::from_screens(params, 2, 8, 21).unwrap();
        assert!(ch.p_keep() > 0.9, "keep probability {}", ch.p_keep());
        assert!(ch.p_flip() < 0.05, "flip probability {}", ch.p_flip());
        assert!(ch.p_keep() + ch.p_flip() <= 1.0 + 1e-9);
    }
}
