//! Name-keyed registries of interchangeable algorithm implementations.
//!
//! Each algorithm family (trajectory solvers, rigid registration methods)
//! exposes a trait; implementations register under a stable name and are
//! looked up at runtime from configuration or command-line flags.

use crate::error::{CalibError, Result};

/// Anything that can be stored in a [`Registry`].
pub trait Named {
    fn name(&self) -> &'static str;
}

pub struct Registry<T: ?Sized + Named> {
    kind: &'static str,
    entries: Vec<Box<T>>,
}

impl<T: ?Sized + Named> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: Vec::new(),
        }
    }

    /// Adds an implementation. A later registration with the same name
    /// replaces the earlier one.
    pub fn register(&mut self, entry: Box<T>) {
        let name = entry.name();
        self.entries.retain(|e| e.name() != name);
        self.entries.push(entry);
    }

    pub fn get(&self, name: &str) -> Result<&T> {
        self.entries
            .iter()
            .find(|e| e.name() == name)
            .map(|e| e.as_ref())
            .ok_or_else(|| CalibError::UnknownStrategy {
                kind: self.kind,
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|e| e.name()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.entries.iter().map(|e| e.as_ref())
    }
}
