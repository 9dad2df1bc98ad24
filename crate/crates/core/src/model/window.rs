//! Which audio tokens each latent frame may attend to.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::KeySpan;

/// How the audio window of a latent frame is computed.
///
/// `Prose` keeps the `r` frames of latent `i` plus one token either side
/// (`r + 2` tokens away from the edges). `FormulaLiteral` uses the lower
/// bound `(i−1)·r − 1`, which gives `r + 3` interior tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowMode {
    #[default]
    Prose,
    FormulaLiteral,
}

impl WindowMode {
    /// Allowed token count for a row that touches neither clamp.
    pub fn interior_width(self, r: usize) -> usize {
        match self {
            WindowMode::Prose => r + 2,
            WindowMode::FormulaLiteral => r + 3,
        }
    }
}

impl fmt::Display for WindowMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WindowMode::Prose => "prose",
            WindowMode::FormulaLiteral => "formula-literal",
        })
    }
}

impl std::str::FromStr for WindowMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prose" => Ok(WindowMode::Prose),
            "formula-literal" | "formula" => Ok(WindowMode::FormulaLiteral),
            other => Err(Error::Parameter(format!(
                "unknown window mode {other:?} (expected prose or formula-literal)"
            ))),
        }
    }
}

/// Inclusive 1-based audio token range for latent frame `i` (1-based).
pub fn window_bounds(i: usize, r: usize, t: usize, mode: WindowMode) -> Result<(usize, usize)> {
    if r == 0 || t == 0 {
        return Err(Error::Parameter(format!("window needs r ≥ 1 and T ≥ 1, got r={r}, T={t}")));
    }
    let tau = t / r;
    if i == 0 || i > tau {
        return Err(Error::Index { index: i, max: tau });
    }
    let start = ((i - 1) * r) as i64;
    let lo = match mode {
        WindowMode::Prose => start,
        WindowMode::FormulaLiteral => start - 1,
    };
    let lo = lo.max(1) as usize;
    let hi = (i * r + 1).min(t);
    Ok((lo, hi))
}

/// Boolean `τ×T` allow matrix built row by row from [`window_bounds`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowMask {
    frames: usize,
    tokens: usize,
    mode: WindowMode,
    allow: Vec<bool>,
}

pub fn build_window_mask(tau: usize, r: usize, t: usize, mode: WindowMode) -> Result<WindowMask> {
    if tau == 0 || r == 0 || tau * r != t {
        return Err(Error::Shape(format!("need τ·r == T, got τ={tau}, r={r}, T={t}")));
    }
    let mut allow = vec![false; tau * t];
    for i in 1..=tau {
        let (lo, hi) = window_bounds(i, r, t, mode)?;
        allow[(i - 1) * t + lo - 1..(i - 1) * t + hi].fill(true);
    }
    Ok(WindowMask {
        frames: tau,
        tokens: t,
        mode,
        allow,
    })
}

impl WindowMask {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn mode(&self) -> WindowMode {
        self.mode
    }

    /// 0-based `frame`, 0-based `token`.
    pub fn allows(&self, frame: usize, token: usize) -> bool {
        self.allow[frame * self.tokens + token]
    }

    pub fn row(&self, frame: usize) -> &[bool] {
        &self.allow[frame * self.tokens..(frame + 1) * self.tokens]
    }

    /// 0-based half-open span of allowed tokens for a row.
    pub fn span(&self, frame: usize) -> KeySpan {
        let row = self.row(frame);
        let lo = row.iter().position(|&a| a).unwrap_or(0);
        let hi = row.iter().rposition(|&a| a).map_or(0, |p| p + 1);
        (lo, hi)
    }

    /// Spans for a token sequence where each latent frame contributes
    /// `tokens_per_frame` consecutive query rows sharing that frame's window.
    pub fn expand(&self, tokens_per_frame: usize) -> Arc<[KeySpan]> {
        (0..self.frames)
            .flat_map(|f| std::iter::repeat_n(self.span(f), tokens_per_frame))
            .collect()
    }

    /// Text rendering, one row per latent frame (`#` allowed, `.` masked).
    pub fn render(&self) -> String {
        let mut out = String::with_capacity(self.frames * (self.tokens + 1));
        for f in 0..self.frames {
            out.extend(self.row(f).iter().map(|&a| if a { '#' } else { '.' }));
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn formula_literal_interior_row() {
        assert_eq!(window_bounds(2, 4, 128, WindowMode::FormulaLiteral).unwrap(), (3, 9));
    }

    #[test]
    fn prose_interior_row() {
        let (lo, hi) = window_bounds(2, 4, 128, WindowMode::Prose).unwrap();
        assert_eq!((lo, hi), (4, 9));
        assert_eq!(hi - lo + 1, 6);
    }

    #[test]
    fn first_row_clamps_in_both_modes() {
        for mode in [WindowMode::Prose, WindowMode::FormulaLiteral] {
            assert_eq!(window_bounds(1, 4, 128, mode).unwrap(), (1, 5));
        }
    }

    #[test]
    fn last_row_clamps() {
        assert_eq!(window_bounds(32, 4, 128, WindowMode::Prose).unwrap(), (124, 128));
    }

    #[test]
    fn out_of_range_index() {
        assert!(matches!(
            window_bounds(33, 4, 128, WindowMode::Prose),
            Err(Error::Index { index: 33, max: 32 })
        ));
        assert!(window_bounds(0, 4, 128, WindowMode::Prose).is_err());
    }

    #[test]
    fn degenerate_mask() {
        let m = build_window_mask(1, 1, 1, WindowMode::Prose).unwrap();
        assert_eq!(m.row(0), &[true]);
    }

    #[test]
    fn small_prose_mask_rows() {
        let m = build_window_mask(4, 2, 8, WindowMode::Prose).unwrap();
        let rows: Vec<_> = (0..4).map(|f| m.span(f)).collect();
        // 0-based half-open of (1,3),(2,5),(4,7),(6,8)
        assert_eq!(rows, vec![(0, 3), (1, 5), (3, 7), (5, 8)]);
    }

    #[test]
    fn ratio_violation() {
        assert!(matches!(build_window_mask(3, 4, 13, WindowMode::Prose), Err(Error::Shape(_))));
    }

    #[test]
    fn expand_repeats_rows() {
        let m = build_window_mask(2, 2, 4, WindowMode::Prose).unwrap();
        let s = m.expand(3);
        assert_eq!(&*s, &[(0, 3), (0, 3), (0, 3), (1, 4), (1, 4), (1, 4)]);
    }

    proptest! {
        #[test]
        fn mask_invariants(tau in 1usize..=64, r in prop::sample::select(vec![1usize, 2, 3, 4, 8]), literal in any::<bool>()) {
            let mode = if literal { WindowMode::FormulaLiteral } else { WindowMode::Prose };
            let t = tau * r;
            let m = build_window_mask(tau, r, t, mode).unwrap();
            let mut covered = vec![false; t];
            let mut prev = (0, 0);
            for f in 0..tau {
                let row = m.row(f);
                let (lo, hi) = m.span(f);
                prop_assert!(hi > lo);
                // contiguous: everything inside the span is allowed, nothing outside
                for (j, &a) in row.iter().enumerate() {
                    prop_assert_eq!(a, (lo..hi).contains(&j));
                    covered[j] |= a;
                }
                prop_assert!(lo >= prev.0 && hi >= prev.1);
                prev = (lo, hi);
                let touches_edge = lo == 0 || hi == t;
                if !touches_edge {
                    prop_assert_eq!(hi - lo, mode.interior_width(r));
                }
            }
            prop_assert!(covered.iter().all(|&c| c));
        }
    }
}
