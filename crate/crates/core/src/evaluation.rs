//! Cross-building transfer study: one model per building, every model tested
//! on every building, and the resulting error matrix clustered and compared
//! with the description-based clustering.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metadata::{DescriptionTable, Encoding};
use crate::model::{evaluate, train, ErrorScale, ForecastModel, ModelConfig, TrainHistory};
use crate::similarity::{
    cut_at_fraction, linkage, minmax_scale_matrix, pairwise_euclidean, symmetrize, ClusterAssignment, LinkageMethod,
    LinkageTree, Matrix,
};
use crate::timeseries::{build_windows, BuildingSeries, DateRange, NormalizationStats};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub model: ModelConfig,
    /// Buildings with fewer training windows are excluded.
    pub min_train_windows: usize,
    /// Min-max scale the finished matrix to [0, 1].
    pub scale_matrix: bool,
    pub error_scale: ErrorScale,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            model: ModelConfig::default(),
            min_train_windows: 30,
            scale_matrix: false,
            error_scale: ErrorScale::Normalized,
        }
    }
}

/// Per-building models trained on their own training windows.
#[derive(Debug, Clone)]
pub struct FleetModels {
    pub ids: Vec<String>,
    pub models: Vec<ForecastModel>,
    pub histories: Vec<TrainHistory>,
    pub excluded: Vec<(String, String)>,
}

impl FleetModels {
    pub fn model(&self, id: &str) -> Option<&ForecastModel> {
        self.ids.iter().position(|x| x == id).map(|i| &self.models[i])
    }
}

/// Rows are training buildings, columns test buildings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub ids: Vec<String>,
    pub values: Matrix,
    pub excluded: Vec<(String, String)>,
    pub scaled: bool,
    pub error_scale: ErrorScale,
}

impl TransferMatrix {
    pub fn get(&self, train_id: &str, test_id: &str) -> Option<f64> {
        let i = self.ids.iter().position(|x| x == train_id)?;
        let j = self.ids.iter().position(|x| x == test_id)?;
        Some(self.values.get(i, j))
    }

    /// Delimited table with `#` comment lines first: the given metadata,
    /// then the exclusion list.
    pub fn to_csv(&self, metadata: &[String]) -> String {
        let mut s = String::new();
        for m in metadata {
            s.push_str(&format!("# {m}\n"));
        }
        s.push_str(&format!("# scaled: {}\n# error_scale: {:?}\n", self.scaled, self.error_scale));
        for (id, why) in &self.excluded {
            s.push_str(&format!("# excluded: {id}: {why}\n"));
        }
        s.push_str("train\\test");
        for id in &self.ids {
            s.push_str(&format!(",{id}"));
        }
        s.push('\n');
        for (i, id) in self.ids.iter().enumerate() {
            s.push_str(id);
            for v in self.values.row(i) {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }

    /// Fraction of rows whose diagonal entry is at most the row mean.
    pub fn diagonal_advantage(&self) -> f64 {
        let n = self.ids.len();
        let hits = (0..n)
            .filter(|&i| {
                let row = self.values.row(i);
                row[i] <= row.iter().sum::<f64>() / n as f64
            })
            .count();
        hits as f64 / n as f64
    }
}

/// Trains one model per building on its windows in `train_range`, each
/// normalized with that building's own statistics. Training runs in
/// parallel; results keep fleet order.
pub fn train_fleet(fleet: &[BuildingSeries], train_range: Option<DateRange>, cfg: &EvalConfig) -> Result<FleetModels> {
    cfg.model.validate()?;
    let mut excluded = Vec::new();
    let mut jobs = Vec::new();
    for b in fleet {
        let stats = match NormalizationStats::fit(&[b], train_range) {
            Ok(s) => s,
            Err(e) => {
                excluded.push((b.building_id.clone(), e.to_string()));
                continue;
            }
        };
        let ds = build_windows(b, &stats, train_range);
        if ds.len() < cfg.min_train_windows {
            excluded.push((
                b.building_id.clone(),
                format!("{} training windows, need {}", ds.len(), cfg.min_train_windows),
            ));
            continue;
        }
        jobs.push((b.building_id.clone(), ds));
    }
    if jobs.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 buildings with enough training data, have {}",
            jobs.len()
        )));
    }
    let trained: Vec<Result<(ForecastModel, TrainHistory)>> = jobs
        .par_iter()
        .map(|(_, ds)| train(ForecastModel::init(&cfg.model)?, ds))
        .collect();
    let mut out = FleetModels {
        ids: Vec::new(),
        models: Vec::new(),
        histories: Vec::new(),
        excluded,
    };
    for ((id, _), r) in jobs.into_iter().zip(trained) {
        let (m, h) = r?;
        log::info!("trained building {id}: {} epochs, best mse {:.4e}", h.epochs(), h.best_loss);
        out.ids.push(id);
        out.models.push(m);
        out.histories.push(h);
    }
    Ok(out)
}

/// Tests every fleet model on every building's `test_range` windows,
/// normalized with the training building's statistics.
pub fn transfer_matrix(
    models: &FleetModels,
    fleet: &[BuildingSeries],
    test_range: Option<DateRange>,
    error_scale: ErrorScale,
    scale: bool,
) -> Result<TransferMatrix> {
    let mut excluded = models.excluded.clone();
    let mut ids = Vec::new();
    let mut tests = Vec::new();
    for id in &models.ids {
        let b = fleet
            .iter()
            .find(|b| &b.building_id == id)
            .ok_or_else(|| Error::NotFound(format!("series for building `{id}`")))?;
        let any = NormalizationStats::fit(&[b], None)?;
        if build_windows(b, &any, test_range).is_empty() {
            excluded.push((id.clone(), "no test windows".into()));
        } else {
            ids.push(id.clone());
            tests.push(b);
        }
    }
    if ids.len() < 2 {
        return Err(Error::invalid("need at least 2 buildings with test windows"));
    }
    let n = ids.len();
    let rows: Vec<Result<Vec<f64>>> = ids
        .par_iter()
        .map(|train_id| {
            let m = models.model(train_id).expect("model exists for included id");
            let stats = m.stats.ok_or_else(|| Error::invalid("model without statistics"))?;
            tests
                .iter()
                .map(|b| evaluate(m, &build_windows(b, &stats, test_range), error_scale))
                .collect()
        })
        .collect();
    let mut values = Matrix::zeros(n, n);
    for (i, r) in rows.into_iter().enumerate() {
        for (j, v) in r?.into_iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::invalid(format!("non-finite error for {} on {}", ids[i], ids[j])));
            }
            values.set(i, j, v);
        }
    }
    if scale {
        values = minmax_scale_matrix(&values)?;
    }
    Ok(TransferMatrix {
        ids,
        values,
        excluded,
        scaled: scale,
        error_scale,
    })
}

pub fn cross_building_matrix(
    fleet: &[BuildingSeries],
    train_range: Option<DateRange>,
    test_range: Option<DateRange>,
    cfg: &EvalConfig,
) -> Result<TransferMatrix> {
    let models = train_fleet(fleet, train_range, cfg)?;
    transfer_matrix(&models, fleet, test_range, cfg.error_scale, cfg.scale_matrix)
}

/// Symmetrize, link and cut the error matrix.
pub fn error_matrix_clusters(
    m: &TransferMatrix,
    method: LinkageMethod,
    fraction: f64,
) -> Result<(LinkageTree, ClusterAssignment)> {
    let d = symmetrize(&m.ids, &m.values)?;
    let tree = linkage(&d, method)?;
    let clusters = cut_at_fraction(&tree, fraction)?;
    Ok((tree, clusters))
}

/// Clusters building descriptions: impute, encode, min-max scale, Euclidean
/// distances, link and cut.
pub fn description_clusters(
    table: &DescriptionTable,
    encoding: Encoding,
    method: LinkageMethod,
    fraction: f64,
) -> Result<(LinkageTree, ClusterAssignment)> {
    let enc = crate::metadata::encode_table(table, encoding, true)?;
    let tree = linkage(&pairwise_euclidean(&enc)?, method)?;
    let clusters = cut_at_fraction(&tree, fraction)?;
    Ok((tree, clusters))
}

/// Rand index: the fraction of id pairs on which both partitions agree.
pub fn clustering_agreement(a: &ClusterAssignment, b: &ClusterAssignment) -> Result<f64> {
    let mut ia: Vec<&String> = a.ids.iter().collect();
    let mut ib: Vec<&String> = b.ids.iter().collect();
    ia.sort();
    ib.sort();
    if ia != ib {
        return Err(Error::invalid("partitions cover different building ids"));
    }
    let n = a.ids.len();
    if n < 2 {
        return Ok(1.0);
    }
    let lb: Vec<usize> = a
        .ids
        .iter()
        .map(|id| b.label_of(id).expect("same id set"))
        .collect();
    let mut agree = 0usize;
    let mut total = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            let same_a = a.labels[i] == a.labels[j];
            let same_b = lb[i] == lb[j];
            agree += usize::from(same_a == same_b);
            total += 1;
        }
    }
    Ok(agree as f64 / total as f64)
}

/// For each test building: mean error of models from its own group (itself
/// excluded) and mean error of models from other groups.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupComparison {
    pub target: String,
    pub same_group: f64,
    pub cross_group: f64,
}

impl GroupComparison {
    pub fn same_group_wins(&self) -> bool {
        self.same_group < self.cross_group
    }
}

pub fn compare_source_groups(m: &TransferMatrix, groups: &ClusterAssignment) -> Result<Vec<GroupComparison>> {
    let mut out = Vec::new();
    for (j, target) in m.ids.iter().enumerate() {
        let g = groups
            .label_of(target)
            .ok_or_else(|| Error::NotFound(format!("group of building `{target}`")))?;
        let (mut same, mut cross) = (Vec::new(), Vec::new());
        for (i, src) in m.ids.iter().enumerate() {
            if i == j {
                continue;
            }
            match groups.label_of(src) {
                Some(h) if h == g => same.push(m.values.get(i, j)),
                Some(_) => cross.push(m.values.get(i, j)),
                None => return Err(Error::NotFound(format!("group of building `{src}`"))),
            }
        }
        if same.is_empty() || cross.is_empty() {
            continue;
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        out.push(GroupComparison {
            target: target.clone(),
            same_group: mean(&same),
            cross_group: mean(&cross),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{FleetConfig, SyntheticFleet};
    use proptest::prelude::*;

    fn assignment(ids: &[&str], labels: &[usize]) -> ClusterAssignment {
        ClusterAssignment::from_labels(ids.iter().map(|s| s.to_string()).collect(), labels)
    }

    #[test]
    fn rand_index_examples() {
        let a = assignment(&["1", "2", "3"], &[0, 0, 1]);
        assert_eq!(clustering_agreement(&a, &a).unwrap(), 1.0);
        let singles = assignment(&["1", "2", "3"], &[0, 1, 2]);
        let together = assignment(&["1", "2", "3"], &[0, 0, 0]);
        assert_eq!(clustering_agreement(&singles, &together).unwrap(), 0.0);
        let b = assignment(&["1", "2", "3"], &[0, 1, 1]);
        assert!((clustering_agreement(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let other = assignment(&["1", "2", "4"], &[0, 1, 1]);
        assert!(clustering_agreement(&a, &other).is_err());
    }

    #[test]
    fn rand_index_ignores_id_order() {
        let a = assignment(&["1", "2", "3"], &[0, 0, 1]);
        let b = assignment(&["3", "1", "2"], &[5, 7, 7]);
        assert_eq!(clustering_agreement(&a, &b).unwrap(), 1.0);
    }

    fn matrix(ids: &[&str], rows: &[Vec<f64>]) -> TransferMatrix {
        TransferMatrix {
            ids: ids.iter().map(|s| s.to_string()).collect(),
            values: Matrix::from_rows(rows).unwrap(),
            excluded: vec![],
            scaled: false,
            error_scale: ErrorScale::Normalized,
        }
    }

    #[test]
    fn block_matrix_gives_its_blocks() {
        let m = matrix(
            &["a", "b", "c", "d"],
            &[
                vec![0.1, 0.2, 5.0, 5.1],
                vec![0.2, 0.1, 5.2, 5.0],
                vec![5.0, 5.2, 0.1, 0.3],
                vec![5.1, 5.0, 0.3, 0.1],
            ],
        );
        let (_, c) = error_matrix_clusters(&m, LinkageMethod::Average, 0.7).unwrap();
        assert_eq!(c.labels, vec![0, 0, 1, 1]);
    }

    #[test]
    fn two_buildings_stay_apart_at_the_default_cut() {
        let m = matrix(&["a", "b"], &[vec![0.1, 0.9], vec![0.7, 0.2]]);
        let (t, c) = error_matrix_clusters(&m, LinkageMethod::Average, 0.7).unwrap();
        assert_eq!(t.merges.len(), 1);
        assert_eq!(c.n_clusters(), 2);
    }

    #[test]
    fn export_has_comment_header_and_grid() {
        let mut m = matrix(&["1", "2"], &[vec![0.5, 1.5], vec![2.0, 0.25]]);
        m.excluded.push(("12".into(), "3 training windows, need 30".into()));
        let s = m.to_csv(&["seed: 7".into()]);
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "# seed: 7");
        assert!(s.contains("# excluded: 12: 3 training windows"));
        assert!(lines.contains(&"train\\test,1,2"));
        assert!(lines.contains(&"1,0.5,1.5"));
        assert!(lines.contains(&"2,2,0.25"));
    }

    #[test]
    fn group_comparison_reads_columns() {
        let m = matrix(
            &["1", "2", "3"],
            &[vec![0.0, 1.0, 4.0], vec![2.0, 0.0, 5.0], vec![3.0, 6.0, 0.0]],
        );
        let g = assignment(&["1", "2", "3"], &[0, 0, 1]);
        let c = compare_source_groups(&m, &g).unwrap();
        // building 3 has no same-group source
        assert_eq!(c.len(), 2);
        assert_eq!(c[0], GroupComparison { target: "1".into(), same_group: 2.0, cross_group: 3.0 });
        assert!(c[1].same_group_wins());
    }

    fn quick_cfg() -> EvalConfig {
        EvalConfig {
            model: ModelConfig {
                lstm_sizes: vec![4],
                fc_sizes: vec![3],
                max_epochs: 3,
                patience: 2,
                lr_start: 1e-2,
                lr_end: 1e-3,
                ..ModelConfig::default()
            },
            ..EvalConfig::default()
        }
    }

    #[test]
    fn two_building_fleet_gives_two_by_two_and_is_reproducible() {
        let f = SyntheticFleet::generate(&FleetConfig { per_group: 1, days: 90, ..FleetConfig::default() }).unwrap();
        let (tr, te) = (Some(f.train_range(60)), Some(f.test_range(60)));
        let a = cross_building_matrix(&f.buildings, tr, te, &quick_cfg()).unwrap();
        assert_eq!((a.values.nrows, a.values.ncols), (2, 2));
        assert!(a.values.data.iter().all(|v| v.is_finite()));
        let b = cross_building_matrix(&f.buildings, tr, te, &quick_cfg()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn short_buildings_are_excluded() {
        let f = SyntheticFleet::generate(&FleetConfig { per_group: 2, days: 90, ..FleetConfig::default() }).unwrap();
        let mut fleet = f.buildings.clone();
        // building 1 keeps only 20 days of energy: 7 windows < 30
        for v in fleet[0].energy.values.iter_mut().skip(20) {
            *v = None;
        }
        let m = cross_building_matrix(&fleet, Some(f.train_range(60)), Some(f.test_range(60)), &quick_cfg()).unwrap();
        assert_eq!(m.ids, vec!["2", "3", "4"]);
        assert_eq!(m.excluded.len(), 1);
        assert_eq!(m.excluded[0].0, "1");
        let two = &fleet[..2];
        assert!(cross_building_matrix(two, Some(f.train_range(60)), Some(f.test_range(60)), &quick_cfg()).is_err());
    }

    proptest! {
        #[test]
        fn agreement_is_symmetric(la in prop::collection::vec(0usize..3, 2..8), seed in 0usize..100) {
            let ids: Vec<String> = (0..la.len()).map(|i| i.to_string()).collect();
            let lb: Vec<usize> = la.iter().enumerate().map(|(i, l)| (l + i * seed) % 3).collect();
            let a = ClusterAssignment::from_labels(ids.clone(), &la);
            let b = ClusterAssignment::from_labels(ids, &lb);
            let x = clustering_agreement(&a, &b).unwrap();
            prop_assert_eq!(x, clustering_agreement(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&x));
        }

        #[test]
        fn positive_rescaling_keeps_clusters(
            vals in prop::collection::vec(0.01f64..10.0, 25),
            k in 0.1f64..50.0,
        ) {
            let rows: Vec<Vec<f64>> = vals.chunks(5).map(|c| c.to_vec()).collect();
            let ids = ["1", "2", "3", "4", "5"];
            let m = matrix(&ids, &rows);
            let scaled_rows: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v * k).collect()).collect();
            let s = matrix(&ids, &scaled_rows);
            for method in LinkageMethod::ALL {
                let (ta, ca) = error_matrix_clusters(&m, method, 0.7).unwrap();
                let (tb, cb) = error_matrix_clusters(&s, method, 0.7).unwrap();
                prop_assert_eq!(ca, cb);
                let topo = |t: &LinkageTree| t.merges.iter().map(|m| (m.left, m.right, m.count)).collect::<Vec<_>>();
                prop_assert_eq!(topo(&ta), topo(&tb));
            }
        }

        #[test]
        fn minmax_scaling_keeps_the_tree_shape(vals in prop::collection::vec(0.01f64..10.0, 25)) {
            let rows: Vec<Vec<f64>> = vals.chunks(5).map(|c| c.to_vec()).collect();
            let ids = ["1", "2", "3", "4", "5"];
            let m = matrix(&ids, &rows);
            let mut s = m.clone();
            s.values = minmax_scale_matrix(&m.values).unwrap();
            for method in LinkageMethod::ALL {
                let (ta, _) = error_matrix_clusters(&m, method, 0.7).unwrap();
                let (tb, _) = error_matrix_clusters(&s, method, 0.7).unwrap();
                let topo = |t: &LinkageTree| t.merges.iter().map(|m| (m.left, m.right, m.count)).collect::<Vec<_>>();
                prop_assert_eq!(topo(&ta), topo(&tb));
            }
        }
    }
}
