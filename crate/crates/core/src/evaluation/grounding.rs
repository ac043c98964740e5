use std::collections::BTreeMap;

use super::{cnr, similarity_map, CnrResult};
use crate::data::{label_in_phrase, Dataset, GridBox};
use crate::embeddings::LocalEmbeddings;
use crate::encoders::Report;
use crate::error::{Error, Result};
use crate::model::Model;

/// A query phrase and an image, both in the joint space, with the boxes the
/// phrase refers to.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundingCase {
    pub id: String,
    pub image_locals: LocalEmbeddings,
    pub query: Vec<f64>,
    pub query_text: String,
    pub boxes: Vec<GridBox>,
    pub label: String,
    pub gt_box_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exclusion {
    pub id: String,
    pub reason: String,
}

/// Embeds every sample that has a query. The query's boxes are those whose
/// label occurs in the phrase; when no label occurs, all boxes are used.
pub fn build_grounding_cases(model: &Model, dataset: &Dataset) -> Result<(Vec<GroundingCase>, Vec<Exclusion>)> {
    let mut cases = Vec::new();
    let mut excluded = Vec::new();
    for s in &dataset.samples {
        let Some(query_text) = dataset.queries.get(&s.id) else {
            continue;
        };
        let (label, boxes) = match label_in_phrase(query_text, &s.gt_boxes) {
            Some(l) => {
                let b: Vec<GridBox> = s.gt_boxes.iter().filter(|b| b.label == l).cloned().collect();
                (l, b)
            }
            None => ("unlabeled".to_string(), s.gt_boxes.clone()),
        };
        if boxes.is_empty() {
            excluded.push(Exclusion { id: s.id.clone(), reason: "no ground-truth boxes".into() });
            continue;
        }
        let report = Report::parse(query_text, 1).map_err(|e| e.context(format!("query of `{}`", s.id)))?;
        let text = model.text_joint_locals(&report)?;
        let image_locals = model.image_joint_locals(&s.image)?;
        cases.push(GroundingCase {
            id: s.id.clone(),
            image_locals,
            query: text.vectors().row(0).to_vec(),
            query_text: query_text.clone(),
            gt_box_count: boxes.len(),
            boxes,
            label,
        });
    }
    Ok((cases, excluded))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub group: String,
    pub metric: String,
    pub value: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundingReport {
    pub rows: Vec<ReportRow>,
    pub per_case: Vec<(String, CnrResult)>,
    pub excluded: Vec<Exclusion>,
}

impl GroundingReport {
    pub fn value(&self, group: &str, metric: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.group == group && r.metric == metric).map(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,metric,value,n\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.group, r.metric, r.value, r.n));
        }
        out
    }
}

/// Mean non-absolute and absolute CNR overall (`Avg`), by ground-truth box
/// count (`Single`, `Multiple`) and by finding label (`finding:<label>`).
/// Cases whose boxes leave no interior or no exterior cell are excluded.
pub fn grounding_report(cases: &[GroundingCase]) -> Result<GroundingReport> {
    let mut per_case = Vec::new();
    let mut groups: Vec<(String, Vec<CnrResult>)> =
        vec![("Avg".into(), Vec::new()), ("Single".into(), Vec::new()), ("Multiple".into(), Vec::new())];
    let mut by_label: BTreeMap<String, Vec<CnrResult>> = BTreeMap::new();
    let mut excluded = Vec::new();
    for case in cases {
        let map = similarity_map(&case.query, &case.image_locals)?;
        match cnr(&map, &case.boxes) {
            Ok(r) => {
                groups[0].1.push(r);
                groups[if case.gt_box_count == 1 { 1 } else { 2 }].1.push(r);
                by_label.entry(case.label.clone()).or_default().push(r);
                per_case.push((case.id.clone(), r));
            }
            Err(e) => {
                log::debug!("grounding case `{}` excluded: {e}", case.id);
                excluded.push(Exclusion { id: case.id.clone(), reason: e.to_string() });
            }
        }
    }
    if per_case.is_empty() {
        return Err(Error::InvalidInput(format!("no valid grounding cases ({} excluded)", excluded.len())));
    }
    groups.extend(by_label.into_iter().map(|(l, v)| (format!("finding:{l}"), v)));
    let mut rows = Vec::new();
    // an empty subgroup still gets rows, with value NaN and n = 0
    for (group, results) in groups {
        let n = results.len();
        let mean = |f: fn(&CnrResult) -> f64| results.iter().map(f).sum::<f64>() / n as f64;
        rows.push(ReportRow { group: group.clone(), metric: "cnr".into(), value: mean(|r| r.non_absolute), n });
        rows.push(ReportRow { group, metric: "abs_cnr".into(), value: mean(|r| r.absolute), n });
    }
    Ok(GroundingReport { rows, per_case, excluded })
}
