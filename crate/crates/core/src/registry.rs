//! Name-keyed registries of trait-object strategies.

use crate::error::{Error, Result};

type Ctor<T, A> = fn(&A) -> Result<Box<T>>;

/// Strategies of kind `T` built from arguments `A`, looked up by name or alias.
pub struct Registry<T: ?Sized, A = ()> {
    kind: &'static str,
    entries: Vec<(&'static str, &'static [&'static str], Ctor<T, A>)>,
}

impl<T: ?Sized, A> Registry<T, A> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: Vec::new(),
        }
    }

    pub fn register(mut self, name: &'static str, aliases: &'static [&'static str], ctor: Ctor<T, A>) -> Self {
        self.entries.push((name, aliases, ctor));
        self
    }

    /// Canonical names in registration order.
    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|e| e.0).collect()
    }

    /// Canonical name for `name` or one of its aliases.
    pub fn resolve(&self, name: &str) -> Result<&'static str> {
        self.entries
            .iter()
            .find(|(n, aliases, _)| *n == name || aliases.contains(&name))
            .map(|e| e.0)
            .ok_or_else(|| Error::UnknownStrategy {
                kind: self.kind,
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }

    pub fn create(&self, name: &str, args: &A) -> Result<Box<T>> {
        let canonical = self.resolve(name)?;
        let ctor = self.entries.iter().find(|e| e.0 == canonical).unwrap().2;
        ctor(args)
    }
}
