//! A tiny KAR instance with a reference trace computed independently
//! (`docs/worked_kar.py`): four word pieces of width four, one two-piece
//! mention with two candidates, entity width three and a single head.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kar::{self, KarConfig, KarTrace};
use crate::kb::{Candidate, CandidateDictionary, CandidateList, KnowledgeBase, Span};
use crate::params::{Graph, ParamStore};
use crate::tensor::Tensor2;

/// The bundled instance and its reference trace.
pub const WORKED_JSON: &str = include_str!("../data/worked_kar.json");

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WorkedInputs {
    pub config: KarConfig,
    pub h: Vec<Vec<f64>>,
    pub entities: Vec<Vec<f64>>,
    pub span: [usize; 2],
    pub candidates: Vec<(usize, f64)>,
    pub params: BTreeMap<String, Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WorkedExample {
    pub inputs: WorkedInputs,
    pub trace: KarTrace,
}

impl WorkedExample {
    pub fn bundled() -> Result<Self> {
        Ok(serde_json::from_str(WORKED_JSON)?)
    }

    /// Runs the layer on the inputs and returns the computed trace.
    pub fn compute(&self) -> Result<KarTrace> {
        let inp = &self.inputs;
        let mut store = ParamStore::<f64>::new();
        for (name, rows) in &inp.params {
            store.insert(name.clone(), Tensor2::from_rows(rows)?, true);
        }
        let names = (0..inp.entities.len()).map(|i| format!("e{i}")).collect();
        let kb = KnowledgeBase::new(inp.config.kb.clone(), names, Tensor2::from_rows(&inp.entities)?, CandidateDictionary::new())?;
        let candidates = CandidateList {
            spans: vec![Span {
                start: inp.span[0],
                end: inp.span[1],
                candidates: inp.candidates.iter().map(|&(entity, prior)| Candidate { entity, prior }).collect(),
            }],
        };
        let g = Graph::frozen(&store);
        let h = g.tape().constant(Tensor2::from_rows(&inp.h)?);
        let out = kar::kar_forward(&g, h, &candidates, &kb, &inp.config, None)?;
        KarTrace::capture(&g, &out).ok_or_else(|| Error::Invalid("worked instance produced no KAR intermediates".into()))
    }
}
