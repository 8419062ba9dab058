//! The two mutually unbiased bases used by the protocol in d = 2 and d = 4,
//! their generator matrices, and the waveplate sequences that prepare each
//! basis state from horizontally polarized ℓ = 0 input.
//!
//! d = 2 states live on the two-mode space {|L,−ℓ⟩, |R,+ℓ⟩}:
//! ζ^{1,2} = (|L,−ℓ⟩ ± |R,+ℓ⟩)/√2 and ξ^{1,2} = (|L,−ℓ⟩ ± i|R,+ℓ⟩)/√2.
//!
//! d = 4 states live on {|H,ℓ⟩, |H,−ℓ⟩, |V,ℓ⟩, |V,−ℓ⟩}: the ψ basis is that
//! set itself, and φ^{1..4} are the equal-weight circular combinations
//! (|L,ℓ⟩ ± |R,−ℓ⟩)/√2, (|L,−ℓ⟩ ± |R,ℓ⟩)/√2.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::spinorbit::{hwp, qplate, qwp, ModeIndex, Polarization, StateVector};
use crate::{Error, Result};

/// A dimension with its two mutually unbiased bases.
#[derive(Debug, Clone)]
pub struct MubSet {
    d: usize,
    ell: i32,
    /// `bases[0]` is the computational-side basis (ζ or ψ), `bases[1]` the
    /// superposition basis (ξ or φ).
    bases: [Vec<StateVector>; 2],
    labels: [Vec<&'static str>; 2],
    /// Generator matrices (d = 4 only): `m0` = identity over the natural
    /// modes, `m1` the superposition generator. `m1` rows are written over
    /// the mode order {|H,ℓ⟩, |V,ℓ⟩, |H,−ℓ⟩, |V,−ℓ⟩}.
    generators: Option<(DMatrix<Complex64>, DMatrix<Complex64>)>,
}

/// Mode order shared by every d = 4 state and detection-matrix block.
pub fn span_basis_d4(ell: i32) -> Vec<ModeIndex> {
    vec![
        ModeIndex::new(Polarization::H, ell),
        ModeIndex::new(Polarization::H, -ell),
        ModeIndex::new(Polarization::V, ell),
        ModeIndex::new(Polarization::V, -ell),
    ]
}

/// Mode order shared by every d = 2 state.
pub fn span_basis_d2(ell: i32) -> Vec<ModeIndex> {
    vec![
        ModeIndex::new(Polarization::L, -ell),
        ModeIndex::new(Polarization::R, ell),
    ]
}

impl MubSet {
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn ell(&self) -> i32 {
        self.ell
    }

    pub fn basis(&self, b: usize) -> &[StateVector] {
        &self.bases[b]
    }

    pub fn state(&self, b: usize, i: usize) -> Result<&StateVector> {
        self.bases
            .get(b)
            .and_then(|v| v.get(i))
            .ok_or_else(|| Error::InvalidArgument(format!("no state ({b},{i}) in d={}", self.d)))
    }

    pub fn label(&self, b: usize, i: usize) -> &'static str {
        self.labels[b][i]
    }

    pub fn labels(&self, b: usize) -> &[&'static str] {
        &self.labels[b]
    }

    /// Generator matrices (M₀, M₁); present for d = 4.
    pub fn generators(&self) -> Option<(&DMatrix<Complex64>, &DMatrix<Complex64>)> {
        self.generators.as_ref().map(|(a, b)| (a, b))
    }

    /// Largest deviation of |⟨αⁱ|αʲ⟩|² from δᵢⱼ within each basis.
    pub fn orthonormality_deviation(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for basis in &self.bases {
            for (i, a) in basis.iter().enumerate() {
                for (j, b) in basis.iter().enumerate() {
                    let want = if i == j { 1.0 } else { 0.0 };
                    worst = worst.max((a.fidelity(b) - want).abs());
                }
            }
        }
        worst
    }

    /// Largest deviation of the cross-basis |⟨αⁱ|βʲ⟩|² from 1/d.
    pub fn unbiasedness_deviation(&self) -> f64 {
        let inv_d = 1.0 / self.d as f64;
        let mut worst: f64 = 0.0;
        for a in &self.bases[0] {
            for b in &self.bases[1] {
                worst = worst.max((a.fidelity(b) - inv_d).abs());
            }
        }
        worst
    }
}

/// The d = 2 pair of mutually unbiased bases on the ±ℓ OAM doublet.
pub fn mub_d2(ell: i32) -> Result<MubSet> {
    if ell < 1 {
        return Err(Error::InvalidArgument(format!(
            "OAM index must be ≥ 1, got {ell}"
        )));
    }
    let span = span_basis_d2(ell);
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let r = |x: f64, y: f64| Complex64::new(x * h, y * h);
    let make = |a: Complex64, b: Complex64| StateVector::new(span.clone(), vec![a, b]);
    let zeta1 = make(r(1.0, 0.0), r(1.0, 0.0))?;
    let zeta2 = make(r(1.0, 0.0), r(-1.0, 0.0))?;
    let xi1 = make(r(1.0, 0.0), r(0.0, 1.0))?;
    let xi2 = make(r(1.0, 0.0), r(0.0, -1.0))?;
    Ok(MubSet {
        d: 2,
        ell,
        bases: [vec![zeta1, zeta2], vec![xi1, xi2]],
        labels: [vec!["zeta1", "zeta2"], vec!["xi1", "xi2"]],
        generators: None,
    })
}

/// The d = 4 pair of mutually unbiased bases on the full spin-orbit space.
pub fn mub_d4(ell: i32) -> Result<MubSet> {
    if ell < 1 {
        return Err(Error::InvalidArgument(format!(
            "OAM index must be ≥ 1, got {ell}"
        )));
    }
    let span = span_basis_d4(ell);
    let psi: Vec<StateVector> = (0..4)
        .map(|k| StateVector::basis_state(span.clone(), k))
        .collect::<Result<_>>()?;

    let circ = vec![
        ModeIndex::new(Polarization::L, ell),
        ModeIndex::new(Polarization::L, -ell),
        ModeIndex::new(Polarization::R, ell),
        ModeIndex::new(Polarization::R, -ell),
    ];
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let zero = Complex64::new(0.0, 0.0);
    let p = Complex64::new(h, 0.0);
    let m = Complex64::new(-h, 0.0);
    // (L,+ℓ ± R,−ℓ)/√2 then (L,−ℓ ± R,+ℓ)/√2, over `circ` ordering.
    let phi_amps = [
        [p, zero, zero, p],
        [p, zero, zero, m],
        [zero, p, p, zero],
        [zero, p, m, zero],
    ];
    let phi: Vec<StateVector> = phi_amps
        .iter()
        .map(|amps| StateVector::new(circ.clone(), amps.to_vec())?.express_in(&span))
        .collect::<Result<_>>()?;

    let m0 = DMatrix::<Complex64>::identity(4, 4);
    let half = Complex64::new(0.5, 0.0);
    let i2 = Complex64::new(0.0, 0.5);
    let mi2 = Complex64::new(0.0, -0.5);
    let mhalf = Complex64::new(-0.5, 0.0);
    // Rows generate φ¹..φ⁴ over mode order {Hℓ, Vℓ, H−ℓ, V−ℓ}.
    let m1 = DMatrix::from_row_slice(
        4,
        4,
        &[
            half, i2, half, mi2, //
            half, i2, mhalf, i2, //
            half, mi2, half, i2, //
            mhalf, i2, half, i2,
        ],
    );

    Ok(MubSet {
        d: 4,
        ell,
        bases: [psi, phi],
        labels: [
            vec!["psi1", "psi2", "psi3", "psi4"],
            vec!["phi1", "phi2", "phi3", "phi4"],
        ],
        generators: Some((m0, m1)),
    })
}

/// Convenience dispatcher over the two supported dimensions.
pub fn mub_for_dim(d: usize, ell: i32) -> Result<MubSet> {
    match d {
        2 => mub_d2(ell),
        4 => mub_d4(ell),
        _ => Err(Error::InvalidArgument(format!(
            "unsupported dimension {d} (only 2 and 4)"
        ))),
    }
}

/// One element of a preparation sequence, applied left to right.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PrepStep {
    /// Half-wave plate at the given fast-axis angle (degrees).
    Hwp(f64),
    /// Quarter-wave plate at the given fast-axis angle (degrees).
    Qwp(f64),
    /// Tuned q-plate of the given topological charge.
    QPlate(f64),
    /// Slot left empty on the bench; acts as the identity.
    None,
}

/// A waveplate sequence that prepares one MUB state from [`recipe_input`].
#[derive(Debug, Clone)]
pub struct PrepRecipe {
    /// Index of the target basis within the [`MubSet`] (0 or 1).
    pub basis: usize,
    /// Index of the target state within that basis.
    pub index: usize,
    pub label: &'static str,
    pub steps: Vec<PrepStep>,
}

/// The source state every recipe starts from: |H, ℓ=0⟩ (the transmitted
/// port of the source polarizer, before any OAM is imprinted).
pub fn recipe_input() -> StateVector {
    StateVector::basis_state(
        vec![
            ModeIndex::new(Polarization::H, 0),
            ModeIndex::new(Polarization::V, 0),
        ],
        0,
    )
    .expect("static two-mode basis state")
}

/// The four d = 2 sequences: one half-wave plate, then a q = 1/2 plate.
///
/// The published angle table assigns +22.5° to ξ¹ and −22.5° to ξ²; under
/// the handedness convention fixed in [`crate::spinorbit`] those two angles
/// land on the opposite ξ states, so the labels here are swapped — a single
/// relabeling, invisible to any measurement, applied uniformly.
pub fn recipes_d2() -> Vec<PrepRecipe> {
    let q = 0.5;
    vec![
        PrepRecipe {
            basis: 0,
            index: 0,
            label: "zeta1",
            steps: vec![PrepStep::Hwp(0.0), PrepStep::QPlate(q)],
        },
        PrepRecipe {
            basis: 0,
            index: 1,
            label: "zeta2",
            steps: vec![PrepStep::Hwp(45.0), PrepStep::QPlate(q)],
        },
        PrepRecipe {
            basis: 1,
            index: 0,
            label: "xi1",
            steps: vec![PrepStep::Hwp(-22.5), PrepStep::QPlate(q)],
        },
        PrepRecipe {
            basis: 1,
            index: 1,
            label: "xi2",
            steps: vec![PrepStep::Hwp(22.5), PrepStep::QPlate(q)],
        },
    ]
}

/// The eight d = 4 sequences: QWP–QP–QWP for the ψ basis and HWP–QP–HWP
/// (second plate sometimes absent) for the φ basis, with a q = 1 plate.
pub fn recipes_d4() -> Vec<PrepRecipe> {
    let q = 1.0;
    let qp = PrepStep::QPlate(q);
    vec![
        PrepRecipe {
            basis: 0,
            index: 0,
            label: "psi1",
            steps: vec![PrepStep::Qwp(-45.0), qp, PrepStep::Qwp(-45.0)],
        },
        PrepRecipe {
            basis: 0,
            index: 1,
            label: "psi2",
            steps: vec![PrepStep::Qwp(45.0), qp, PrepStep::Qwp(45.0)],
        },
        PrepRecipe {
            basis: 0,
            index: 2,
            label: "psi3",
            steps: vec![PrepStep::Qwp(-45.0), qp, PrepStep::Qwp(45.0)],
        },
        PrepRecipe {
            basis: 0,
            index: 3,
            label: "psi4",
            steps: vec![PrepStep::Qwp(45.0), qp, PrepStep::Qwp(-45.0)],
        },
        PrepRecipe {
            basis: 1,
            index: 0,
            label: "phi1",
            steps: vec![PrepStep::Hwp(0.0), qp, PrepStep::Hwp(0.0)],
        },
        PrepRecipe {
            basis: 1,
            index: 1,
            label: "phi2",
            steps: vec![PrepStep::Hwp(45.0), qp, PrepStep::Hwp(0.0)],
        },
        PrepRecipe {
            basis: 1,
            index: 2,
            label: "phi3",
            steps: vec![PrepStep::Hwp(0.0), qp, PrepStep::None],
        },
        PrepRecipe {
            basis: 1,
            index: 3,
            label: "phi4",
            steps: vec![PrepStep::Hwp(45.0), qp, PrepStep::None],
        },
    ]
}

fn distinct_oams(state: &StateVector) -> Vec<i32> {
    let mut oams: Vec<i32> = Vec::new();
    for m in state.basis() {
        if !oams.contains(&m.oam) {
            oams.push(m.oam);
        }
    }
    oams
}

/// Applies one preparation step to a state.
pub fn apply_step(state: &StateVector, step: &PrepStep) -> Result<StateVector> {
    match step {
        PrepStep::Hwp(deg) => hwp(*deg, &distinct_oams(state))?.apply(state),
        PrepStep::Qwp(deg) => qwp(*deg, &distinct_oams(state))?.apply(state),
        PrepStep::QPlate(q) => {
            let oams = distinct_oams(state);
            if oams.len() != 1 {
                return Err(Error::SubspaceLeakage(format!(
                    "q-plate input spans {} OAM manifolds; a single plate acts on one",
                    oams.len()
                )));
            }
            qplate(*q, oams[0])?.apply(state)
        }
        PrepStep::None => Ok(state.clone()),
    }
}

/// Runs the full sequence on `input` and returns the produced state.
pub fn run_recipe(recipe: &PrepRecipe, input: &StateVector) -> Result<StateVector> {
    let mut s = input.clone();
    for step in &recipe.steps {
        s = apply_step(&s, step)?;
    }
    Ok(s)
}

/// Fidelity |⟨target|produced⟩|² of a recipe against its labeled MUB state,
/// starting from `input` (global phase ignored).
pub fn verify_recipe(recipe: &PrepRecipe, mubs: &MubSet, input: &StateVector) -> Result<f64> {
    let produced = run_recipe(recipe, input)?;
    let target = mubs.state(recipe.basis, recipe.index)?;
    Ok(produced.fidelity(target))
}
