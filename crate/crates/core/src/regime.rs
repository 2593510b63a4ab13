//! Tax regimes and the effective rate each (residence, source, booking)
//! triple faces, split by collecting jurisdiction.

use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::tensor::Tensor3;
use crate::world::WorldCalibration;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaxingRights {
    Residence,
    Source,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// Only this country applies the rule.
    Unilateral(usize),
    /// Every non-haven applies it.
    Multilateral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CarveOut {
    /// Top-ups hit only profits booked in a haven.
    #[default]
    ShiftedOnly,
    /// Foreign production profits are covered too (residence rights only).
    AllForeign,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinTax {
    pub rate: f64,
    pub rights: TaxingRights,
    pub scope: Scope,
    #[serde(default)]
    pub carve_out: CarveOut,
    #[serde(default)]
    pub haven_adjust: bool,
}

impl MinTax {
    pub fn new(rate: f64, rights: TaxingRights, scope: Scope) -> Self {
        Self { rate, rights, scope, carve_out: CarveOut::ShiftedOnly, haven_adjust: false }
    }

    pub fn with_haven_adjust(mut self) -> Self {
        self.haven_adjust = true;
        self
    }

    fn implements(&self, world: &WorldCalibration, k: usize) -> bool {
        match self.scope {
            Scope::Unilateral(c) => c == k,
            Scope::Multilateral => !world.countries.is_haven(k),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaxRegime {
    #[default]
    Territorial,
    /// Residence-level surcharge on all worldwide profits of resident firms.
    ResidenceTopUp { rates: Vec<f64> },
    MinTax(MinTax),
}

/// Effective rate on one triple.
#[derive(Debug, Clone, PartialEq)]
pub struct RateCell {
    pub total: f64,
    /// Rate net of any residence surcharge; drives the variable-elasticity
    /// differential so a uniform surcharge leaves frictions untouched.
    pub ve: f64,
    pub collectors: Vec<(usize, f64)>,
}

/// Rate on profits from source `l` booked in country `h` (`h == l` for no
/// shifting) by firms resident in `i`.
pub fn effective_rate(world: &WorldCalibration, regime: &TaxRegime, i: usize, l: usize, h: usize) -> Result<RateCell> {
    let c = &world.countries;
    let n = c.len();
    if i >= n || l >= n || h >= n {
        return Err(ModelError::Dimension(format!("triple ({i}, {l}, {h}) out of range")));
    }
    let shifted = h != l;
    if shifted && (c.is_haven(l) || !c.is_haven(h) || c.is_haven(i)) {
        return Err(ModelError::ForbiddenFlow { i, l, h });
    }
    let base = if shifted {
        world.tax_haven[c.haven_slot(h).expect("checked haven")]
    } else {
        world.tax_domestic[l]
    };
    let cell = match regime {
        TaxRegime::Territorial => RateCell { total: base, ve: base, collectors: vec![(h, base)] },
        TaxRegime::ResidenceTopUp { rates } => {
            let r = *rates
                .get(i)
                .ok_or_else(|| ModelError::Dimension(format!("{} top-up rates for {n} countries", rates.len())))?;
            let total = 1.0 - (1.0 - r) * (1.0 - base);
            let mut collectors = vec![(h, base)];
            if r != 0.0 {
                collectors.push((i, r * (1.0 - base)));
            }
            RateCell { total, ve: base, collectors }
        }
        TaxRegime::MinTax(m) => {
            if m.haven_adjust {
                let t = if shifted { base.max(m.rate) } else { base };
                RateCell { total: t, ve: t, collectors: vec![(h, t)] }
            } else {
                let holder = match m.rights {
                    TaxingRights::Residence => i,
                    TaxingRights::Source => l,
                };
                let covered_foreign =
                    m.carve_out == CarveOut::AllForeign && m.rights == TaxingRights::Residence && i != l;
                let covered = (shifted || covered_foreign) && m.implements(world, holder);
                let top_up = if covered { (m.rate - base).max(0.0) } else { 0.0 };
                let mut collectors = vec![(h, base)];
                if top_up > 0.0 {
                    collectors.push((holder, top_up));
                }
                RateCell { total: base + top_up, ve: base + top_up, collectors }
            }
        }
    };
    if !(0.0..1.0).contains(&cell.total) {
        let o = if shifted { 1 + c.haven_slot(h).unwrap_or(0) } else { 0 };
        return Err(ModelError::RateAtOne { i, l, o, rate: cell.total });
    }
    Ok(cell)
}

/// Rates for every supported (i, l, o) cell. Unsupported cells (haven
/// sources with o ≥ 1, haven residences shifting) stay at zero with no
/// collectors; their probabilities are zero anyway.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateTable {
    pub total: Tensor3,
    pub ve: Tensor3,
    pub collectors: Vec<Vec<(usize, f64)>>,
}

impl RateTable {
    pub fn build(world: &WorldCalibration, regime: &TaxRegime) -> Result<Self> {
        let c = &world.countries;
        let n = c.len();
        let havens = c.havens();
        let mut total = Tensor3::zeros(n, havens.len());
        let mut ve = total.clone();
        let mut collectors = vec![Vec::new(); total.data.len()];
        for i in 0..n {
            for l in 0..n {
                for o in 0..total.options {
                    let h = if o == 0 { l } else { havens[o - 1] };
                    if o > 0 && (c.is_haven(l) || c.is_haven(i)) {
                        continue;
                    }
                    let cell = effective_rate(world, regime, i, l, h)?;
                    let k = total.idx(i, l, o);
                    total.data[k] = cell.total;
                    ve.data[k] = cell.ve;
                    collectors[k] = cell.collectors;
                }
            }
        }
        Ok(Self { total, ve, collectors })
    }

    /// Revenue per collecting country given pre-tax booked profits.
    pub fn revenue(&self, pretax: &Tensor3) -> Vec<f64> {
        let mut b = vec![0.0; pretax.n];
        for (k, cols) in self.collectors.iter().enumerate() {
            let p = pretax.data[k];
            if p == 0.0 {
                continue;
            }
            for (c, r) in cols {
                b[*c] += r * p;
            }
        }
        b
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn world() -> WorldCalibration {
        let mut w = WorldCalibration::symmetric(&[false, false, false, true, true], 1.2);
        w.tax_domestic = vec![0.3, 0.2, 0.12, 0.0, 0.04];
        w.tax_haven = vec![0.05, 0.01];
        w
    }

    #[test]
    fn min_tax_residence_top_up_goes_to_residence() {
        let m = MinTax::new(0.15, TaxingRights::Residence, Scope::Multilateral);
        let r = effective_rate(&world(), &TaxRegime::MinTax(m), 0, 1, 3).unwrap();
        assert!((r.total - 0.15).abs() < 1e-15);
        assert_eq!(r.collectors[0], (3, 0.05));
        assert_eq!(r.collectors[1].0, 0);
        assert!((r.collectors[1].1 - 0.10).abs() < 1e-15);
    }

    #[test]
    fn territorial_domestic_single_collector() {
        let r = effective_rate(&world(), &TaxRegime::Territorial, 0, 1, 1).unwrap();
        assert_eq!(r.collectors, vec![(1, 0.2)]);
        assert_eq!(r.total, 0.2);
    }

    #[test]
    fn haven_adjust_raises_rate_without_top_up() {
        let m = MinTax::new(0.15, TaxingRights::Residence, Scope::Multilateral).with_haven_adjust();
        let r = effective_rate(&world(), &TaxRegime::MinTax(m), 0, 1, 3).unwrap();
        assert_eq!(r.collectors, vec![(3, 0.15)]);
    }

    #[test]
    fn haven_source_cannot_shift() {
        let e = effective_rate(&world(), &TaxRegime::Territorial, 0, 3, 4).unwrap_err();
        assert!(matches!(e, ModelError::ForbiddenFlow { .. }));
    }

    #[test]
    fn unilateral_source_rights_cover_only_that_source() {
        let m = MinTax::new(0.15, TaxingRights::Source, Scope::Unilateral(1));
        let reg = TaxRegime::MinTax(m);
        let covered = effective_rate(&world(), &reg, 0, 1, 3).unwrap();
        let other = effective_rate(&world(), &reg, 1, 0, 3).unwrap();
        assert_eq!(covered.collectors[1].0, 1);
        assert_eq!(other.total, 0.05);
    }

    #[test]
    fn all_foreign_carve_out_tops_up_low_tax_production() {
        let mut m = MinTax::new(0.15, TaxingRights::Residence, Scope::Unilateral(0));
        m.carve_out = CarveOut::AllForeign;
        let r = effective_rate(&world(), &TaxRegime::MinTax(m), 0, 2, 2).unwrap();
        assert!((r.total - 0.15).abs() < 1e-15);
        let home = effective_rate(&world(), &TaxRegime::MinTax(m), 0, 0, 0).unwrap();
        assert_eq!(home.total, 0.3);
    }

    fn regimes() -> impl Strategy<Value = TaxRegime> {
        let rights = prop_oneof![Just(TaxingRights::Residence), Just(TaxingRights::Source)];
        let scope = prop_oneof![Just(Scope::Multilateral), (0usize..5).prop_map(Scope::Unilateral)];
        let carve = prop_oneof![Just(CarveOut::ShiftedOnly), Just(CarveOut::AllForeign)];
        prop_oneof![
            Just(TaxRegime::Territorial),
            proptest::collection::vec(0.0..0.5f64, 5).prop_map(|rates| TaxRegime::ResidenceTopUp { rates }),
            (0.0..0.6f64, rights, scope, carve, any::<bool>()).prop_map(|(rate, rights, scope, carve_out, haven_adjust)| {
                TaxRegime::MinTax(MinTax { rate, rights, scope, carve_out, haven_adjust })
            }),
        ]
    }

    proptest! {
        #[test]
        fn collectors_add_up(regime in regimes()) {
            let t = RateTable::build(&world(), &regime).unwrap();
            for (k, cols) in t.collectors.iter().enumerate() {
                let s: f64 = cols.iter().map(|c| c.1).sum();
                prop_assert!(cols.iter().all(|c| c.1 >= 0.0));
                prop_assert!((0.0..1.0).contains(&t.total.data[k]));
                if !cols.is_empty() {
                    prop_assert!((s - t.total.data[k]).abs() < 1e-14);
                }
            }
        }

        #[test]
        fn low_minimum_is_territorial(rights in prop_oneof![Just(TaxingRights::Residence), Just(TaxingRights::Source)],
                                      rate in 0.0..0.01f64) {
            let w = world();
            let m = TaxRegime::MinTax(MinTax::new(rate, rights, Scope::Multilateral));
            prop_assert_eq!(RateTable::build(&w, &m).unwrap(), RateTable::build(&w, &TaxRegime::Territorial).unwrap());
        }
    }
}
