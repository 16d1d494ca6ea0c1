//! The full / no-inverse-consistency / no-anti-folding training matrix.

use icnet_core::losses::{folding_count, LossReport, LossWeights, Reduction};
use icnet_core::network::FcnParams;
use icnet_core::trainer::evaluate_pair;
use icnet_core::Volume;

use crate::error::Result;

/// Variant name and its loss weights derived from `base`.
pub fn variants(base: LossWeights) -> [(&'static str, LossWeights); 3] {
    [
        ("full", base),
        ("no_inverse", base.without_inverse_consistency()),
        ("no_antifolding", base.without_anti_folding()),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairResult {
    pub variant: String,
    pub pair: (usize, usize),
    pub report: LossReport,
    pub folding_ab: usize,
    pub folding_ba: usize,
}

pub const ABLATION_HEADER: &str = "variant,a,b,sim,smo,inv,ant,total,folding_ab,folding_ba";

/// Scores `params` on each pair under `weights`.
pub fn evaluate_pairs(
    variant: &str,
    params: &FcnParams,
    volumes: &[Volume],
    pairs: &[(usize, usize)],
    weights: &LossWeights,
    reduction: Reduction,
) -> Result<Vec<PairResult>> {
    pairs
        .iter()
        .map(|&(i, j)| {
            let report = evaluate_pair(params, &volumes[i], &volumes[j], weights, reduction)?;
            let (fab, fba) = params.predict(&volumes[i], &volumes[j])?;
            Ok(PairResult {
                variant: variant.to_string(),
                pair: (i, j),
                report,
                folding_ab: folding_count(&fab),
                folding_ba: folding_count(&fba),
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[PairResult]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let p = &r.report;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.variant, r.pair.0, r.pair.1, p.sim, p.smo, p.inv, p.ant, p.total, r.folding_ab, r.folding_ba
        ));
    }
    out
}
