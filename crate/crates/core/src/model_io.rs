//! Versioned JSON documents for trained models and codebooks. Values are
//! written in shortest round-trip form, so loading a saved model reproduces
//! its predictions bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cluster::{Codebook, CodebookEntry};
use crate::error::{Error, Result};
use crate::kernel::HyperParams;
use crate::model::{ClassifierState, ModelConfig, PredictorKind, TrainedModel};

pub const MODEL_SCHEMA: &str = "gface-model/1";
pub const CODEBOOK_SCHEMA: &str = "gface-codebook/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MatrixDoc {
    rows: usize,
    cols: usize,
    /// Row-major entries.
    data: Vec<f64>,
}

impl MatrixDoc {
    fn from_matrix(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.nrows() * m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        MatrixDoc { rows: m.nrows(), cols: m.ncols(), data }
    }

    fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::format("matrix entry count does not match its shape"));
        }
        Ok(DMatrix::from_fn(self.rows, self.cols, |i, j| self.data[i * self.cols + j]))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ThetaDoc {
    theta0: f64,
    ard: Vec<f64>,
    bias: f64,
    noise_inv: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ClassifierDoc {
    f_hat: Vec<f64>,
    w: Vec<f64>,
    d1: Vec<f64>,
    log_marginal: f64,
}

/// Validation outcome recorded at training time, reproducible on reload.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ValidationRecord {
    pub accuracy: f64,
    pub auc: f64,
    pub n_pairs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelDocument {
    schema: String,
    config: ModelConfig,
    theta: ThetaDoc,
    target_x: MatrixDoc,
    target_y: Vec<f64>,
    target_z: MatrixDoc,
    source_z: Vec<MatrixDoc>,
    classifier: ClassifierDoc,
    /// "dense", or anchor locations for the low-rank path.
    anchors: Option<MatrixDoc>,
    trace: Vec<f64>,
    converged: bool,
    pub validation: Option<ValidationRecord>,
}

pub fn model_to_document(
    model: &TrainedModel,
    validation: Option<ValidationRecord>,
) -> ModelDocument {
    ModelDocument {
        schema: MODEL_SCHEMA.to_string(),
        config: model.config.clone(),
        theta: ThetaDoc {
            theta0: model.theta.theta0,
            ard: model.theta.ard.clone(),
            bias: model.theta.bias,
            noise_inv: model.theta.noise_inv,
        },
        target_x: MatrixDoc::from_matrix(&model.target_x),
        target_y: model.target_y.iter().copied().collect(),
        target_z: MatrixDoc::from_matrix(&model.target_z),
        source_z: model.source_z.iter().map(MatrixDoc::from_matrix).collect(),
        classifier: ClassifierDoc {
            f_hat: model.classifier.f_hat.iter().copied().collect(),
            w: model.classifier.w.iter().copied().collect(),
            d1: model.classifier.d1.iter().copied().collect(),
            log_marginal: model.classifier.log_marginal,
        },
        anchors: match &model.predictor_kind {
            PredictorKind::Dense => None,
            PredictorKind::LowRank { anchors } => Some(MatrixDoc::from_matrix(anchors)),
        },
        trace: model.trace.clone(),
        converged: model.converged,
        validation,
    }
}

pub fn document_to_model(doc: &ModelDocument) -> Result<TrainedModel> {
    if doc.schema != MODEL_SCHEMA {
        return Err(Error::format(format!(
            "unsupported model schema {:?}, expected {MODEL_SCHEMA:?}",
            doc.schema
        )));
    }
    let theta = HyperParams::new(
        doc.theta.theta0,
        doc.theta.ard.clone(),
        doc.theta.bias,
        doc.theta.noise_inv,
    )?;
    let n = doc.target_y.len();
    if doc.target_x.rows != n || doc.target_z.rows != n {
        return Err(Error::format("label count does not match stored matrices"));
    }
    for field in [&doc.classifier.f_hat, &doc.classifier.w, &doc.classifier.d1] {
        if field.len() != n {
            return Err(Error::format("classifier state size does not match data"));
        }
    }
    Ok(TrainedModel {
        config: doc.config.clone(),
        theta,
        target_x: doc.target_x.to_matrix()?,
        target_y: DVector::from_vec(doc.target_y.clone()),
        target_z: doc.target_z.to_matrix()?,
        source_z: doc
            .source_z
            .iter()
            .map(|m| m.to_matrix())
            .collect::<Result<Vec<_>>>()?,
        classifier: ClassifierState {
            f_hat: DVector::from_vec(doc.classifier.f_hat.clone()),
            w: DVector::from_vec(doc.classifier.w.clone()),
            d1: DVector::from_vec(doc.classifier.d1.clone()),
            log_marginal: doc.classifier.log_marginal,
        },
        predictor_kind: match &doc.anchors {
            None => PredictorKind::Dense,
            Some(a) => PredictorKind::LowRank { anchors: a.to_matrix()? },
        },
        trace: doc.trace.clone(),
        converged: doc.converged,
    })
}

fn json_error(err: serde_json::Error) -> Error {
    Error::format(format!("line {} column {}: {err}", err.line(), err.column()))
}

pub fn save_model<P: AsRef<Path>>(
    path: P,
    model: &TrainedModel,
    validation: Option<ValidationRecord>,
) -> Result<()> {
    let doc = model_to_document(model, validation);
    let mut file = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut file, &doc).map_err(json_error)?;
    file.flush()?;
    Ok(())
}

pub fn load_model_document<P: AsRef<Path>>(path: P) -> Result<ModelDocument> {
    let file = BufReader::new(File::open(path)?);
    serde_json::from_reader(file).map_err(json_error)
}

pub fn load_model<P: AsRef<Path>>(path: P) -> Result<(TrainedModel, Option<ValidationRecord>)> {
    let doc = load_model_document(path)?;
    let model = document_to_model(&doc)?;
    Ok((model, doc.validation))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EntryDoc {
    center: Vec<f64>,
    spread: Vec<f64>,
    weight: f64,
    probability: f64,
    variance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodebookDocument {
    schema: String,
    latent_dim: usize,
    entries: Vec<EntryDoc>,
}

pub fn codebook_to_document(book: &Codebook) -> CodebookDocument {
    CodebookDocument {
        schema: CODEBOOK_SCHEMA.to_string(),
        latent_dim: book.latent_dim,
        entries: book
            .entries
            .iter()
            .map(|e| EntryDoc {
                center: e.center.iter().copied().collect(),
                spread: e.spread.iter().copied().collect(),
                weight: e.weight,
                probability: e.probability,
                variance: e.variance,
            })
            .collect(),
    }
}

pub fn document_to_codebook(doc: &CodebookDocument) -> Result<Codebook> {
    if doc.schema != CODEBOOK_SCHEMA {
        return Err(Error::format(format!(
            "unsupported codebook schema {:?}, expected {CODEBOOK_SCHEMA:?}",
            doc.schema
        )));
    }
    let entries = doc
        .entries
        .iter()
        .map(|e| {
            if e.center.len() != doc.latent_dim || e.spread.len() != doc.latent_dim {
                return Err(Error::format("codebook entry dimension mismatch"));
            }
            Ok(CodebookEntry {
                center: DVector::from_vec(e.center.clone()),
                spread: DVector::from_vec(e.spread.clone()),
                weight: e.weight,
                probability: e.probability,
                variance: e.variance,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Codebook { entries, latent_dim: doc.latent_dim })
}

pub fn save_codebook<P: AsRef<Path>>(path: P, book: &Codebook) -> Result<()> {
    let doc = codebook_to_document(book);
    let mut file = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut file, &doc).map_err(json_error)?;
    file.flush()?;
    Ok(())
}

pub fn load_codebook<P: AsRef<Path>>(path: P) -> Result<Codebook> {
    let file = BufReader::new(File::open(path)?);
    let doc: CodebookDocument = serde_json::from_reader(file).map_err(json_error)?;
    document_to_codebook(&doc)
}
