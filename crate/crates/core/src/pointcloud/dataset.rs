//! Labelled collections and the sealed target-label store.

use std::cell::Cell;

use super::{Domain, PointCloud};
use crate::error::{contract, Result};

thread_local! {
    static ADAPTING: Cell<usize> = const { Cell::new(0) };
}

/// While alive, any attempt on this thread to read sealed labels panics.
///
/// Training and self-training hold one for their whole duration.
pub struct AdaptationGuard(());

impl AdaptationGuard {
    pub fn enter() -> Self {
        ADAPTING.with(|a| a.set(a.get() + 1));
        Self(())
    }

    pub fn active() -> bool {
        ADAPTING.with(|a| a.get() > 0)
    }
}

impl Drop for AdaptationGuard {
    fn drop(&mut self) {
        ADAPTING.with(|a| a.set(a.get() - 1));
    }
}

/// Ground-truth labels kept out of reach of adaptation code.
#[derive(Clone, PartialEq, Eq)]
pub struct SealedLabels(Vec<usize>);

impl std::fmt::Debug for SealedLabels {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SealedLabels(<{} hidden>)", self.0.len())
    }
}

impl SealedLabels {
    pub fn new(labels: Vec<usize>) -> Self {
        Self(labels)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// # Panics
    /// If called while an [`AdaptationGuard`] is active on this thread.
    pub fn reveal(&self) -> &[usize] {
        assert!(
            !AdaptationGuard::active(),
            "target labels accessed inside an adaptation code path"
        );
        &self.0
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub domain: Domain,
    pub classes: usize,
    pub clouds: Vec<PointCloud>,
    pub ids: Vec<String>,
    sealed: Option<SealedLabels>,
}

impl Dataset {
    /// Every cloud must carry a label below `classes`.
    pub fn labelled(domain: Domain, classes: usize, clouds: Vec<PointCloud>, ids: Vec<String>) -> Result<Self> {
        if clouds.iter().any(|c| c.label.is_none_or(|l| l >= classes)) {
            return contract(format!("labelled dataset needs every label in 0..{classes}"));
        }
        Self::build(domain, classes, clouds, ids, None)
    }

    /// Clouds are stripped of labels; `sealed`, if given, is kept for evaluation.
    pub fn unlabelled(
        domain: Domain,
        classes: usize,
        clouds: Vec<PointCloud>,
        ids: Vec<String>,
        sealed: Option<SealedLabels>,
    ) -> Result<Self> {
        let clouds = clouds
            .into_iter()
            .map(|mut c| {
                c.label = None;
                c
            })
            .collect();
        if let Some(s) = &sealed {
            if s.0.iter().any(|&l| l >= classes) {
                return contract(format!("sealed labels must lie in 0..{classes}"));
            }
        }
        Self::build(domain, classes, clouds, ids, sealed)
    }

    fn build(
        domain: Domain,
        classes: usize,
        clouds: Vec<PointCloud>,
        ids: Vec<String>,
        sealed: Option<SealedLabels>,
    ) -> Result<Self> {
        if classes == 0 {
            return contract("dataset needs at least one class");
        }
        if ids.len() != clouds.len() || sealed.as_ref().is_some_and(|s| s.len() != clouds.len()) {
            return contract("ids and sealed labels must match the cloud count");
        }
        Ok(Self {
            domain,
            classes,
            clouds,
            ids,
            sealed,
        })
    }

    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    pub fn is_labelled(&self) -> bool {
        self.clouds.iter().all(|c| c.label.is_some())
    }

    pub fn sealed(&self) -> Option<&SealedLabels> {
        self.sealed.as_ref()
    }

    /// Labels for scoring: visible labels, or the sealed ones.
    ///
    /// # Panics
    /// When the labels are sealed and an [`AdaptationGuard`] is active.
    pub fn evaluation_labels(&self) -> Result<Vec<usize>> {
        if self.is_labelled() {
            return Ok(self.clouds.iter().map(|c| c.label.unwrap()).collect());
        }
        match &self.sealed {
            Some(s) => Ok(s.reveal().to_vec()),
            None => contract("dataset has no labels to evaluate against"),
        }
    }
}
