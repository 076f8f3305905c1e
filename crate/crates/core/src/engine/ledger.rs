use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Params,
    Grads,
    Optimizer,
    KvCache,
    Activations,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Params,
        Category::Grads,
        Category::Optimizer,
        Category::KvCache,
        Category::Activations,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Params => "params",
            Category::Grads => "grads",
            Category::Optimizer => "optimizer",
            Category::KvCache => "kv_cache",
            Category::Activations => "activations",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Account {
    pub allocated: u64,
    pub freed: u64,
    pub current: u64,
    pub peak: u64,
}

/// Per-worker, per-category byte accounting with an optional budget.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Ledger {
    budget: Option<u64>,
    accounts: BTreeMap<(usize, Category), Account>,
}

impl Ledger {
    pub fn new(budget: Option<u64>) -> Self {
        Ledger {
            budget,
            accounts: BTreeMap::new(),
        }
    }

    pub fn budget(&self) -> Option<u64> {
        self.budget
    }

    pub fn worker_total(&self, worker: usize) -> u64 {
        self.accounts
            .iter()
            .filter(|((w, _), _)| *w == worker)
            .map(|(_, a)| a.current)
            .sum()
    }

    /// Records an allocation, refusing it if the worker would exceed budget.
    pub fn alloc(&mut self, worker: usize, category: Category, bytes: u64) -> Result<()> {
        if let Some(budget) = self.budget {
            if self.worker_total(worker) + bytes > budget {
                return Err(Error::Budget {
                    worker,
                    category,
                    bytes,
                    budget,
                });
            }
        }
        let a = self.accounts.entry((worker, category)).or_default();
        a.allocated += bytes;
        a.current += bytes;
        a.peak = a.peak.max(a.current);
        Ok(())
    }

    pub fn free(&mut self, worker: usize, category: Category, bytes: u64) -> Result<()> {
        let a = self.accounts.entry((worker, category)).or_default();
        if bytes > a.current {
            return Err(Error::Contract(format!(
                "freeing {bytes} bytes of {} on worker {worker} holding {}",
                category.name(),
                a.current
            )));
        }
        a.freed += bytes;
        a.current -= bytes;
        Ok(())
    }

    pub fn current(&self, worker: usize, category: Category) -> u64 {
        self.accounts.get(&(worker, category)).map_or(0, |a| a.current)
    }

    /// Sum over workers.
    pub fn category_total(&self, category: Category) -> u64 {
        self.accounts
            .iter()
            .filter(|((_, c), _)| *c == category)
            .map(|(_, a)| a.current)
            .sum()
    }

    pub fn peak(&self, worker: usize, category: Category) -> u64 {
        self.accounts.get(&(worker, category)).map_or(0, |a| a.peak)
    }

    /// `allocated − freed == current` for every account.
    pub fn conserved(&self) -> bool {
        self.accounts
            .values()
            .all(|a| a.allocated >= a.freed && a.allocated - a.freed == a.current)
    }

    pub fn accounts(&self) -> impl Iterator<Item = (&(usize, Category), &Account)> {
        self.accounts.iter()
    }
}
