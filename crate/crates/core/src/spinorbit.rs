//! Complex linear algebra over the polarization⊗OAM mode space and the
//! Jones-calculus optical elements acting on it (waveplates, q-plate).
//!
//! # Conventions (fixed here, used everywhere)
//!
//! These sign/handedness choices are not observable individually — every
//! downstream preparation recipe is verified against its target state up to
//! global phase — but they must be used consistently:
//!
//! * Circular basis: `|L⟩ = (|H⟩ + i|V⟩)/√2`, `|R⟩ = (|H⟩ − i|V⟩)/√2`,
//!   equivalently `|H⟩ = (|L⟩+|R⟩)/√2`, `|V⟩ = −i(|L⟩−|R⟩)/√2`.
//! * Half-wave plate at fast-axis angle θ from horizontal (linear basis):
//!   `[[cos2θ, sin2θ], [sin2θ, −cos2θ]]`.
//! * Quarter-wave plate: `R(−θ)·diag(1, i)·R(θ)` with rotation
//!   `R(θ) = [[cosθ, sinθ], [−sinθ, cosθ]]`, so `qwp(45°)|H⟩ ∝ |R⟩` and
//!   `qwp(−45°)|H⟩ ∝ |L⟩`.
//! * Tuned q-plate of charge q: `|L,ℓ⟩ → |R,ℓ+2q⟩`, `|R,ℓ⟩ → |L,ℓ−2q⟩`.
//!
//! All state comparisons go through fidelity `|⟨a|b⟩|²`, so global phase
//! never matters.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::{Error, Result};

/// Tolerance for normalization and unitarity checks.
pub const NORM_TOL: f64 = 1e-12;

const SQRT_HALF: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Which 2-dimensional polarization frame a mode label lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Frame {
    Linear,
    Circular,
}

/// Single-photon polarization label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Polarization {
    H,
    V,
    L,
    R,
}

impl Polarization {
    pub fn frame(self) -> Frame {
        match self {
            Polarization::H | Polarization::V => Frame::Linear,
            Polarization::L | Polarization::R => Frame::Circular,
        }
    }
}

impl std::fmt::Display for Polarization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Polarization::H => "H",
            Polarization::V => "V",
            Polarization::L => "L",
            Polarization::R => "R",
        };
        write!(f, "{s}")
    }
}

/// One basis mode: a polarization label and an OAM index ℓ (units of ħ).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModeIndex {
    pub pol: Polarization,
    pub oam: i32,
}

impl ModeIndex {
    pub fn new(pol: Polarization, oam: i32) -> Self {
        ModeIndex { pol, oam }
    }
}

impl std::fmt::Display for ModeIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{:+}", self.pol, self.oam)
    }
}

/// Normalized pure state over an explicit ordered list of modes.
///
/// All modes of one state share a single polarization frame; the frame is a
/// property of the basis, not of the physics, and [`StateVector::to_frame`]
/// converts losslessly.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    amps: DVector<Complex64>,
    basis: Vec<ModeIndex>,
}

impl StateVector {
    /// Builds a state, enforcing: basis/amplitude length match, no duplicate
    /// modes, uniform frame, and unit norm within [`NORM_TOL`].
    pub fn new(basis: Vec<ModeIndex>, amps: Vec<Complex64>) -> Result<Self> {
        if basis.len() != amps.len() {
            return Err(Error::BasisMismatch(format!(
                "{} modes but {} amplitudes",
                basis.len(),
                amps.len()
            )));
        }
        if basis.is_empty() {
            return Err(Error::InvalidArgument("empty mode basis".into()));
        }
        let frame = basis[0].pol.frame();
        for (i, m) in basis.iter().enumerate() {
            if m.pol.frame() != frame {
                return Err(Error::BasisMismatch(format!(
                    "mode {m} mixes polarization frames within one basis"
                )));
            }
            if basis[..i].contains(m) {
                return Err(Error::BasisMismatch(format!("duplicate mode {m}")));
            }
        }
        let amps = DVector::from_vec(amps);
        let norm2: f64 = amps.iter().map(|a| a.norm_sqr()).sum();
        if (norm2 - 1.0).abs() > NORM_TOL {
            return Err(Error::NotNormalized {
                context: "state vector".into(),
                deviation: (norm2 - 1.0).abs(),
            });
        }
        Ok(StateVector { amps, basis })
    }

    /// The basis state `e_index` over `basis`.
    pub fn basis_state(basis: Vec<ModeIndex>, index: usize) -> Result<Self> {
        let mut amps = vec![Complex64::new(0.0, 0.0); basis.len()];
        if index >= basis.len() {
            return Err(Error::InvalidArgument(format!(
                "basis state index {index} out of range for dim {}",
                basis.len()
            )));
        }
        amps[index] = Complex64::new(1.0, 0.0);
        StateVector::new(basis, amps)
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    pub fn basis(&self) -> &[ModeIndex] {
        &self.basis
    }

    pub fn amps(&self) -> &DVector<Complex64> {
        &self.amps
    }

    pub fn frame(&self) -> Frame {
        self.basis[0].pol.frame()
    }

    /// Amplitude on `mode`, zero if the mode is not in the basis.
    pub fn amp(&self, mode: ModeIndex) -> Complex64 {
        self.basis
            .iter()
            .position(|m| *m == mode)
            .map(|i| self.amps[i])
            .unwrap_or_else(|| Complex64::new(0.0, 0.0))
    }

    /// Re-expresses the state in the other (or same) polarization frame.
    ///
    /// The output basis lists, for every distinct OAM value in order of first
    /// appearance, both polarizations of `frame` — the smallest closed space
    /// that can hold the converted amplitudes.
    pub fn to_frame(&self, frame: Frame) -> StateVector {
        let mut oams: Vec<i32> = Vec::new();
        for m in &self.basis {
            if !oams.contains(&m.oam) {
                oams.push(m.oam);
            }
        }
        let (p0, p1) = match frame {
            Frame::Linear => (Polarization::H, Polarization::V),
            Frame::Circular => (Polarization::L, Polarization::R),
        };
        let mut basis = Vec::with_capacity(2 * oams.len());
        for &oam in &oams {
            basis.push(ModeIndex::new(p0, oam));
            basis.push(ModeIndex::new(p1, oam));
        }
        let mut amps = vec![Complex64::new(0.0, 0.0); basis.len()];
        let i = Complex64::i();
        for (k, m) in self.basis.iter().enumerate() {
            let a = self.amps[k];
            let sector = 2 * oams.iter().position(|&o| o == m.oam).unwrap();
            match (m.pol, frame) {
                (Polarization::H, Frame::Linear)
                | (Polarization::L, Frame::Circular)
                | (Polarization::V, Frame::Linear)
                | (Polarization::R, Frame::Circular) => {
                    let slot = match m.pol {
                        Polarization::H | Polarization::L => sector,
                        _ => sector + 1,
                    };
                    amps[slot] += a;
                }
                // aL = (aH − i·aV)/√2, aR = (aH + i·aV)/√2
                (Polarization::H, Frame::Circular) => {
                    amps[sector] += a * SQRT_HALF;
                    amps[sector + 1] += a * SQRT_HALF;
                }
                (Polarization::V, Frame::Circular) => {
                    amps[sector] += -i * a * SQRT_HALF;
                    amps[sector + 1] += i * a * SQRT_HALF;
                }
                // aH = (aL + aR)/√2, aV = i·(aL − aR)/√2
                (Polarization::L, Frame::Linear) => {
                    amps[sector] += a * SQRT_HALF;
                    amps[sector + 1] += i * a * SQRT_HALF;
                }
                (Polarization::R, Frame::Linear) => {
                    amps[sector] += a * SQRT_HALF;
                    amps[sector + 1] += -i * a * SQRT_HALF;
                }
            }
        }
        // Frame changes are unitary; the constructor's norm check cannot fire.
        StateVector::new(basis, amps).expect("frame change preserves norm")
    }

    /// Re-expresses the state over `target` modes (converting frame first if
    /// needed). Amplitude on modes absent from `target` is subspace leakage
    /// and a hard error, never a silent truncation.
    pub fn express_in(&self, target: &[ModeIndex]) -> Result<StateVector> {
        if target.is_empty() {
            return Err(Error::InvalidArgument("empty target basis".into()));
        }
        let frame = target[0].pol.frame();
        let src = if self.frame() == frame {
            self.clone()
        } else {
            self.to_frame(frame)
        };
        let mut amps = vec![Complex64::new(0.0, 0.0); target.len()];
        let mut lost = 0.0;
        for (k, m) in src.basis.iter().enumerate() {
            let a = src.amps[k];
            match target.iter().position(|t| t == m) {
                Some(slot) => amps[slot] += a,
                None => lost += a.norm_sqr(),
            }
        }
        if lost > NORM_TOL {
            return Err(Error::SubspaceLeakage(format!(
                "probability {lost:.3e} lies outside the target mode set"
            )));
        }
        StateVector::new(target.to_vec(), amps)
    }

    /// ⟨self|other⟩ over a common linear-frame basis (union of OAM values).
    pub fn inner(&self, other: &StateVector) -> Complex64 {
        let mut oams: Vec<i32> = Vec::new();
        for m in self.basis.iter().chain(other.basis.iter()) {
            if !oams.contains(&m.oam) {
                oams.push(m.oam);
            }
        }
        oams.sort_unstable();
        let mut basis = Vec::with_capacity(2 * oams.len());
        for &oam in &oams {
            basis.push(ModeIndex::new(Polarization::H, oam));
            basis.push(ModeIndex::new(Polarization::V, oam));
        }
        let a = self
            .express_in(&basis)
            .expect("union basis spans both states");
        let b = other
            .express_in(&basis)
            .expect("union basis spans both states");
        a.amps.dotc(&b.amps)
    }

    /// Fidelity |⟨self|other⟩|², insensitive to global phase and frame.
    pub fn fidelity(&self, other: &StateVector) -> f64 {
        self.inner(other).norm_sqr()
    }
}

/// Re-expresses `state` in the circular {L,R} polarization frame.
pub fn circular_basis_change(state: &StateVector) -> StateVector {
    state.to_frame(Frame::Circular)
}

/// Born-rule probability |⟨proj|prep⟩|².
///
/// Requires identical basis ordering — use [`StateVector::fidelity`] when the
/// two states were built over different mode lists.
pub fn born_probability(prep: &StateVector, proj: &StateVector) -> Result<f64> {
    if prep.basis != proj.basis {
        return Err(Error::BasisMismatch(
            "born_probability requires identical basis ordering".into(),
        ));
    }
    Ok(proj.amps.dotc(&prep.amps).norm_sqr())
}

/// A linear optical element: a matrix from modes `basis_in` to `basis_out`.
#[derive(Debug, Clone)]
pub struct OpticalOperator {
    basis_in: Vec<ModeIndex>,
    basis_out: Vec<ModeIndex>,
    matrix: DMatrix<Complex64>,
    unitary: bool,
}

impl OpticalOperator {
    /// Wraps a matrix as an operator; when `unitary` is set, U†U = 1 is
    /// enforced within [`NORM_TOL`].
    pub fn new(
        basis_in: Vec<ModeIndex>,
        basis_out: Vec<ModeIndex>,
        matrix: DMatrix<Complex64>,
        unitary: bool,
    ) -> Result<Self> {
        if matrix.ncols() != basis_in.len() || matrix.nrows() != basis_out.len() {
            return Err(Error::BasisMismatch(format!(
                "matrix is {}×{} but bases are {} in / {} out",
                matrix.nrows(),
                matrix.ncols(),
                basis_in.len(),
                basis_out.len()
            )));
        }
        if unitary {
            let gram = matrix.adjoint() * &matrix;
            let dev = (&gram - DMatrix::<Complex64>::identity(gram.nrows(), gram.ncols()))
                .iter()
                .map(|z| z.norm())
                .fold(0.0, f64::max);
            if dev > NORM_TOL {
                return Err(Error::NotNormalized {
                    context: "operator flagged unitary".into(),
                    deviation: dev,
                });
            }
        }
        Ok(OpticalOperator {
            basis_in,
            basis_out,
            matrix,
            unitary,
        })
    }

    pub fn basis_in(&self) -> &[ModeIndex] {
        &self.basis_in
    }

    pub fn basis_out(&self) -> &[ModeIndex] {
        &self.basis_out
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.matrix
    }

    pub fn is_unitary(&self) -> bool {
        self.unitary
    }

    /// Applies the element. The state is first expressed over `basis_in`,
    /// so a frame mismatch is handled and true subspace leakage errors.
    pub fn apply(&self, state: &StateVector) -> Result<StateVector> {
        let s = state.express_in(&self.basis_in)?;
        let out = &self.matrix * s.amps();
        StateVector::new(self.basis_out.clone(), out.iter().copied().collect())
    }
}

/// The 2×2 Jones matrix of a half-wave plate at fast-axis angle θ (radians).
fn hwp_jones(theta: f64) -> [[Complex64; 2]; 2] {
    let (s, c) = (2.0 * theta).sin_cos();
    let r = |x: f64| Complex64::new(x, 0.0);
    [[r(c), r(s)], [r(s), r(-c)]]
}

/// The 2×2 Jones matrix of a quarter-wave plate at angle θ (radians):
/// R(−θ)·diag(1,i)·R(θ).
fn qwp_jones(theta: f64) -> [[Complex64; 2]; 2] {
    let (s, c) = theta.sin_cos();
    let i = Complex64::i();
    let one = Complex64::new(1.0, 0.0);
    [
        [c * c * one + i * s * s, s * c * (one - i)],
        [s * c * (one - i), s * s * one + i * c * c],
    ]
}

/// Lifts a 2×2 polarization Jones matrix to the linear-frame mode space
/// spanned by both polarizations of each OAM value in `oams`.
fn lift_jones(jones: [[Complex64; 2]; 2], oams: &[i32]) -> Result<OpticalOperator> {
    if oams.is_empty() {
        return Err(Error::InvalidArgument(
            "waveplate needs at least one OAM sector".into(),
        ));
    }
    for (i, o) in oams.iter().enumerate() {
        if oams[..i].contains(o) {
            return Err(Error::InvalidArgument(format!("duplicate OAM sector {o}")));
        }
    }
    let n = 2 * oams.len();
    let mut m = DMatrix::<Complex64>::zeros(n, n);
    let mut basis = Vec::with_capacity(n);
    for (k, &oam) in oams.iter().enumerate() {
        basis.push(ModeIndex::new(Polarization::H, oam));
        basis.push(ModeIndex::new(Polarization::V, oam));
        for r in 0..2 {
            for c in 0..2 {
                m[(2 * k + r, 2 * k + c)] = jones[r][c];
            }
        }
    }
    OpticalOperator::new(basis.clone(), basis, m, true)
}

/// Half-wave plate at `theta_deg` degrees, identity on the OAM sectors in
/// `oams`.
pub fn hwp(theta_deg: f64, oams: &[i32]) -> Result<OpticalOperator> {
    lift_jones(hwp_jones(theta_deg.to_radians()), oams)
}

/// Quarter-wave plate at `theta_deg` degrees, identity on the OAM sectors in
/// `oams`.
pub fn qwp(theta_deg: f64, oams: &[i32]) -> Result<OpticalOperator> {
    lift_jones(qwp_jones(theta_deg.to_radians()), oams)
}

/// Tuned q-plate of topological charge `q` (half-integer) acting on the OAM
/// manifold `oam_in`: |L,ℓ⟩ → |R,ℓ+2q⟩ and |R,ℓ⟩ → |L,ℓ−2q⟩.
pub fn qplate(q: f64, oam_in: i32) -> Result<OpticalOperator> {
    let two_q = 2.0 * q;
    if (two_q - two_q.round()).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "q-plate charge must be a half-integer, got {q}"
        )));
    }
    let shift = two_q.round() as i32;
    let basis_in = vec![
        ModeIndex::new(Polarization::L, oam_in),
        ModeIndex::new(Polarization::R, oam_in),
    ];
    let basis_out = vec![
        ModeIndex::new(Polarization::L, oam_in - shift),
        ModeIndex::new(Polarization::R, oam_in + shift),
    ];
    let zero = Complex64::new(0.0, 0.0);
    let one = Complex64::new(1.0, 0.0);
    // Column L,in feeds row R,out; column R,in feeds row L,out.
    let m = DMatrix::from_row_slice(2, 2, &[zero, one, one, zero]);
    if shift == 0 {
        // Degenerate charge: the plate swaps handedness in place.
        return OpticalOperator::new(basis_in.clone(), basis_in, m, true);
    }
    OpticalOperator::new(basis_in, basis_out, m, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn h0() -> StateVector {
        StateVector::basis_state(
            vec![
                ModeIndex::new(Polarization::H, 0),
                ModeIndex::new(Polarization::V, 0),
            ],
            0,
        )
        .unwrap()
    }

    fn v0() -> StateVector {
        StateVector::basis_state(
            vec![
                ModeIndex::new(Polarization::H, 0),
                ModeIndex::new(Polarization::V, 0),
            ],
            1,
        )
        .unwrap()
    }

    #[test]
    fn h_becomes_equal_weight_circular() {
        let s = circular_basis_change(&h0());
        assert_eq!(s.frame(), Frame::Circular);
        let al = s.amp(ModeIndex::new(Polarization::L, 0));
        let ar = s.amp(ModeIndex::new(Polarization::R, 0));
        assert_abs_diff_eq!(al.re, SQRT_HALF, epsilon = 1e-15);
        assert_abs_diff_eq!(ar.re, SQRT_HALF, epsilon = 1e-15);
        assert_abs_diff_eq!(al.im, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn v_becomes_antisymmetric_circular() {
        // |V⟩ = −i(|L⟩−|R⟩)/√2
        let s = circular_basis_change(&v0());
        let al = s.amp(ModeIndex::new(Polarization::L, 0));
        let ar = s.amp(ModeIndex::new(Polarization::R, 0));
        assert_abs_diff_eq!(al.im, -SQRT_HALF, epsilon = 1e-15);
        assert_abs_diff_eq!(ar.im, SQRT_HALF, epsilon = 1e-15);
    }

    #[test]
    fn circular_input_is_fixed_point() {
        let l = StateVector::basis_state(
            vec![
                ModeIndex::new(Polarization::L, 2),
                ModeIndex::new(Polarization::R, 2),
            ],
            0,
        )
        .unwrap();
        let s = circular_basis_change(&l);
        assert_abs_diff_eq!(s.fidelity(&l), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn frame_round_trip_is_identity() {
        let s = StateVector::new(
            vec![
                ModeIndex::new(Polarization::H, -1),
                ModeIndex::new(Polarization::V, 1),
            ],
            vec![c(0.6, 0.0), c(0.0, 0.8)],
        )
        .unwrap();
        let back = s.to_frame(Frame::Circular).to_frame(Frame::Linear);
        assert_abs_diff_eq!(back.fidelity(&s), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn hwp_at_zero_fixes_h() {
        let op = hwp(0.0, &[0]).unwrap();
        let out = op.apply(&h0()).unwrap();
        assert_abs_diff_eq!(out.fidelity(&h0()), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn hwp_at_45_swaps_h_and_v() {
        let op = hwp(45.0, &[0]).unwrap();
        let out = op.apply(&h0()).unwrap();
        assert_abs_diff_eq!(out.fidelity(&v0()), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn hwp_at_22_5_makes_diagonal() {
        let op = hwp(22.5, &[0]).unwrap();
        let out = op.apply(&h0()).unwrap();
        let diag = StateVector::new(
            vec![
                ModeIndex::new(Polarization::H, 0),
                ModeIndex::new(Polarization::V, 0),
            ],
            vec![c(SQRT_HALF, 0.0), c(SQRT_HALF, 0.0)],
        )
        .unwrap();
        assert_abs_diff_eq!(out.fidelity(&diag), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn qwp_at_zero_fixes_h() {
        let op = qwp(0.0, &[0]).unwrap();
        let out = op.apply(&h0()).unwrap();
        assert_abs_diff_eq!(out.fidelity(&h0()), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn qwp_at_45_makes_right_circular() {
        let op = qwp(45.0, &[0]).unwrap();
        let out = op.apply(&h0()).unwrap();
        let r = StateVector::basis_state(
            vec![
                ModeIndex::new(Polarization::L, 0),
                ModeIndex::new(Polarization::R, 0),
            ],
            1,
        )
        .unwrap();
        assert_abs_diff_eq!(out.fidelity(&r), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn qwp_at_minus_45_makes_left_circular() {
        let op = qwp(-45.0, &[0]).unwrap();
        let out = op.apply(&h0()).unwrap();
        let l = StateVector::basis_state(
            vec![
                ModeIndex::new(Polarization::L, 0),
                ModeIndex::new(Polarization::R, 0),
            ],
            0,
        )
        .unwrap();
        assert_abs_diff_eq!(out.fidelity(&l), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn two_qwps_at_same_angle_act_as_hwp() {
        // R(−θ)·diag(1,i)·R(θ) squared telescopes to R(−θ)·diag(1,−1)·R(θ).
        for k in 0..12 {
            let theta = -90.0 + 15.0 * k as f64;
            let q = qwp(theta, &[0]).unwrap();
            let h = hwp(theta, &[0]).unwrap();
            for input in [h0(), v0()] {
                let twice = q.apply(&q.apply(&input).unwrap()).unwrap();
                let once = h.apply(&input).unwrap();
                assert_abs_diff_eq!(twice.fidelity(&once), 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn opposite_qwps_compose_to_identity_up_to_phase() {
        let plus = qwp(45.0, &[0]).unwrap();
        let minus = qwp(-45.0, &[0]).unwrap();
        for input in [h0(), v0()] {
            let out = minus.apply(&plus.apply(&input).unwrap()).unwrap();
            assert_abs_diff_eq!(out.fidelity(&input), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn qplate_charge_one_from_rest() {
        let op = qplate(1.0, 0).unwrap();
        let l0 = StateVector::basis_state(
            vec![
                ModeIndex::new(Polarization::L, 0),
                ModeIndex::new(Polarization::R, 0),
            ],
            0,
        )
        .unwrap();
        let out = op.apply(&l0).unwrap();
        let r2 = StateVector::basis_state(
            vec![
                ModeIndex::new(Polarization::L, -2),
                ModeIndex::new(Polarization::R, 2),
            ],
            1,
        )
        .unwrap();
        assert_abs_diff_eq!(out.fidelity(&r2), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn qplate_charge_half_lowers_right_circular() {
        let op = qplate(0.5, 0).unwrap();
        let r0 = StateVector::basis_state(
            vec![
                ModeIndex::new(Polarization::L, 0),
                ModeIndex::new(Polarization::R, 0),
            ],
            1,
        )
        .unwrap();
        let out = op.apply(&r0).unwrap();
        let l_minus1 = StateVector::basis_state(
            vec![
                ModeIndex::new(Polarization::L, -1),
                ModeIndex::new(Polarization::R, 1),
            ],
            0,
        )
        .unwrap();
        assert_abs_diff_eq!(out.fidelity(&l_minus1), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn qplate_rejects_non_half_integer_charge() {
        assert!(matches!(
            qplate(0.3, 0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn leakage_outside_target_modes_is_an_error() {
        let op = qplate(1.0, 0).unwrap();
        let out = op
            .apply(
                &StateVector::basis_state(
                    vec![
                        ModeIndex::new(Polarization::L, 0),
                        ModeIndex::new(Polarization::R, 0),
                    ],
                    0,
                )
                .unwrap(),
            )
            .unwrap();
        // The produced |R,+2⟩ cannot be expressed over an ℓ = ±1 subspace.
        let err = out.express_in(&[
            ModeIndex::new(Polarization::L, -1),
            ModeIndex::new(Polarization::R, 1),
        ]);
        assert!(matches!(err, Err(Error::SubspaceLeakage(_))));
    }

    #[test]
    fn born_probability_on_matching_bases() {
        let basis = vec![
            ModeIndex::new(Polarization::H, 0),
            ModeIndex::new(Polarization::V, 0),
        ];
        let a = StateVector::basis_state(basis.clone(), 0).unwrap();
        let b = StateVector::basis_state(basis, 1).unwrap();
        assert_abs_diff_eq!(born_probability(&a, &a).unwrap(), 1.0);
        assert_abs_diff_eq!(born_probability(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn born_probability_rejects_mismatched_bases() {
        let a = h0();
        let b = StateVector::basis_state(
            vec![
                ModeIndex::new(Polarization::H, 1),
                ModeIndex::new(Polarization::V, 1),
            ],
            0,
        )
        .unwrap();
        assert!(matches!(
            born_probability(&a, &b),
            Err(Error::BasisMismatch(_))
        ));
    }

    #[test]
    fn unnormalized_state_is_rejected() {
        let err = StateVector::new(
            vec![
                ModeIndex::new(Polarization::H, 0),
                ModeIndex::new(Polarization::V, 0),
            ],
            vec![c(1.0, 0.0), c(0.5, 0.0)],
        );
        assert!(matches!(err, Err(Error::NotNormalized { .. })));
    }

    #[test]
    fn duplicate_mode_is_rejected() {
        let err = StateVector::new(
            vec![
                ModeIndex::new(Polarization::H, 0),
                ModeIndex::new(Polarization::H, 0),
            ],
            vec![c(1.0, 0.0), c(0.0, 0.0)],
        );
        assert!(matches!(err, Err(Error::BasisMismatch(_))));
    }

    #[test]
    fn mixed_frame_basis_is_rejected() {
        let err = StateVector::new(
            vec![
                ModeIndex::new(Polarization::H, 0),
                ModeIndex::new(Polarization::L, 0),
            ],
            vec![c(1.0, 0.0), c(0.0, 0.0)],
        );
        assert!(matches!(err, Err(Error::BasisMismatch(_))));
    }

    proptest! {
        #[test]
        fn hwp_squares_to_identity(theta in -180.0f64..180.0) {
            let op = hwp(theta, &[0]).unwrap();
            for input in [h0(), v0()] {
                let out = op.apply(&op.apply(&input).unwrap()).unwrap();
                prop_assert!((out.fidelity(&input) - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn waveplates_are_unitary(theta in -180.0f64..180.0) {
            // Constructor enforces U†U = 1 within 1e-12 for every build.
            prop_assert!(hwp(theta, &[0, 2, -2]).unwrap().is_unitary());
            prop_assert!(qwp(theta, &[0, 2, -2]).unwrap().is_unitary());
        }

        #[test]
        fn born_is_symmetric(
            re0 in -1.0f64..1.0, im0 in -1.0f64..1.0,
            re1 in -1.0f64..1.0, im1 in -1.0f64..1.0,
            re2 in -1.0f64..1.0, im2 in -1.0f64..1.0,
            re3 in -1.0f64..1.0, im3 in -1.0f64..1.0,
        ) {
            let basis = vec![
                ModeIndex::new(Polarization::H, 0),
                ModeIndex::new(Polarization::V, 0),
            ];
            let na = (re0 * re0 + im0 * im0 + re1 * re1 + im1 * im1).sqrt();
            let nb = (re2 * re2 + im2 * im2 + re3 * re3 + im3 * im3).sqrt();
            prop_assume!(na > 1e-3 && nb > 1e-3);
            let a = StateVector::new(
                basis.clone(),
                vec![c(re0 / na, im0 / na), c(re1 / na, im1 / na)],
            )
            .unwrap();
            let b = StateVector::new(
                basis,
                vec![c(re2 / nb, im2 / nb), c(re3 / nb, im3 / nb)],
            )
            .unwrap();
            let ab = born_probability(&a, &b).unwrap();
            let ba = born_probability(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
        }

        #[test]
        fn projections_on_a_basis_sum_to_one(
            re0 in -1.0f64..1.0, im0 in -1.0f64..1.0,
            re1 in -1.0f64..1.0, im1 in -1.0f64..1.0,
        ) {
            let basis = vec![
                ModeIndex::new(Polarization::H, 0),
                ModeIndex::new(Polarization::V, 0),
            ];
            let n = (re0 * re0 + im0 * im0 + re1 * re1 + im1 * im1).sqrt();
            prop_assume!(n > 1e-3);
            let s = StateVector::new(
                basis.clone(),
                vec![c(re0 / n, im0 / n), c(re1 / n, im1 / n)],
            )
            .unwrap();
            let mut total = 0.0;
            for k in 0..2 {
                let e = StateVector::basis_state(basis.clone(), k).unwrap();
                total += born_probability(&s, &e).unwrap();
            }
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
