//! Image-branch retrieval and ranking metrics.

mod metrics;

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use metrics::{average_precision, mean_average_precision, precision_at, rank, MetricSummary};

use crate::data::{Dataset, GalleryMode, Protocol, SampleRecord, SplitAssignment};
use crate::error::{Error, Result};
use crate::model::{Model, PromptSource};
use crate::numerics::{io::write_tensor, Tensor};

/// Embeds `samples` in order, fanning out over `workers` threads. Output
/// does not depend on the worker count.
pub fn embed_set(model: &Model, samples: &[&SampleRecord], source: PromptSource, workers: usize) -> Result<Vec<Vec<f32>>> {
    let workers = workers.max(1).min(samples.len().max(1));
    if workers == 1 {
        return samples.iter().map(|s| model.embed(s, source)).collect();
    }
    let chunk = samples.len().div_ceil(workers);
    let parts: Vec<Result<Vec<Vec<f32>>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|s| model.embed(s, source)).collect::<Result<Vec<_>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("embedding worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(samples.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricAtK {
    pub k: usize,
    pub map: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalReport {
    pub protocol: Protocol,
    pub gallery_mode: GalleryMode,
    pub mode: PromptSource,
    pub queries: usize,
    pub gallery: usize,
    pub excluded_queries: usize,
    pub metrics: Vec<MetricAtK>,
    pub map_all: f64,
}

impl RetrievalReport {
    pub fn map_at(&self, k: usize) -> Option<f64> {
        self.metrics.iter().find(|m| m.k == k).map(|m| m.map)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryRanking {
    pub query_id: usize,
    /// (gallery sample id, distance), nearest first.
    pub ranked: Vec<(usize, f32)>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: RetrievalReport,
    pub rankings: Vec<QueryRanking>,
    pub query_embeddings: Vec<Vec<f32>>,
    pub gallery_embeddings: Vec<Vec<f32>>,
}

/// Metrics for given query and gallery sample ids.
pub struct SetScores {
    pub summaries: Vec<(usize, MetricSummary)>,
    pub all: MetricSummary,
    pub rankings: Vec<QueryRanking>,
    pub query_embeddings: Vec<Vec<f32>>,
    pub gallery_embeddings: Vec<Vec<f32>>,
}

pub fn score_sets(
    dataset: &Dataset,
    query_ids: &[usize],
    gallery_ids: &[usize],
    model: &Model,
    source: PromptSource,
    ks: &[usize],
    workers: usize,
) -> Result<SetScores> {
    if query_ids.is_empty() || gallery_ids.is_empty() {
        return Err(Error::Infeasible(format!(
            "retrieval needs queries and a gallery, got {} and {}",
            query_ids.len(),
            gallery_ids.len()
        )));
    }
    let queries = dataset.get(query_ids);
    let gallery = dataset.get(gallery_ids);
    let q = embed_set(model, &queries, source, workers)?;
    let g = embed_set(model, &gallery, source, workers)?;
    let mut relevance = Vec::with_capacity(q.len());
    let mut rankings = Vec::with_capacity(q.len());
    for (sample, emb) in queries.iter().zip(&q) {
        let ranked = rank(emb, &g)?;
        relevance.push(ranked.iter().map(|&(i, _)| gallery[i].class_id == sample.class_id).collect::<Vec<_>>());
        rankings.push(QueryRanking { query_id: sample.id, ranked: ranked.into_iter().map(|(i, d)| (gallery[i].id, d)).collect() });
    }
    let summaries = ks.iter().map(|&k| Ok((k, mean_average_precision(&relevance, Some(k))?))).collect::<Result<Vec<_>>>()?;
    let all = mean_average_precision(&relevance, None)?;
    Ok(SetScores { summaries, all, rankings, query_embeddings: q, gallery_embeddings: g })
}

/// Test-split retrieval under one prompt source.
pub fn evaluate(
    dataset: &Dataset,
    splits: &SplitAssignment,
    model: &Model,
    source: PromptSource,
    ks: &[usize],
    gallery_mode: GalleryMode,
    workers: usize,
) -> Result<Evaluation> {
    let scores = score_sets(
        dataset,
        &splits.test_query_ids(),
        &splits.test_gallery_ids(gallery_mode),
        model,
        source,
        ks,
        workers,
    )?;
    if scores.all.excluded > 0 {
        log::warn!("{} queries have no relevant gallery item and are left out of the means", scores.all.excluded);
    }
    let report = RetrievalReport {
        protocol: splits.protocol,
        gallery_mode,
        mode: source,
        queries: scores.rankings.len(),
        gallery: scores.gallery_embeddings.len(),
        excluded_queries: scores.all.excluded,
        metrics: scores.summaries.iter().map(|(k, s)| MetricAtK { k: *k, map: s.map, precision: s.precision }).collect(),
        map_all: scores.all.map,
    };
    Ok(Evaluation {
        report,
        rankings: scores.rankings,
        query_embeddings: scores.query_embeddings,
        gallery_embeddings: scores.gallery_embeddings,
    })
}

/// `query_id,rank,gallery_id,distance` rows.
pub fn rankings_csv(rankings: &[QueryRanking]) -> String {
    let mut out = String::from("query_id,rank,gallery_id,distance\n");
    for q in rankings {
        for (r, (g, d)) in q.ranked.iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{}", q.query_id, r + 1, g, d);
        }
    }
    out
}

/// Query embeddings then gallery embeddings, each as one tensor.
pub fn write_embeddings(eval: &Evaluation, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for set in [&eval.query_embeddings, &eval.gallery_embeddings] {
        let cols = set.first().map_or(0, Vec::len);
        let t = Tensor::new(vec![set.len(), cols], set.concat())?;
        write_tensor(&mut buf, &t);
    }
    std::fs::write(path, buf)?;
    Ok(())
}
