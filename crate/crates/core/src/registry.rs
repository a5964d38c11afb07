//! Name-keyed tables of interchangeable strategies.
//!
//! Each strategy family (noise schedules, posterior-mean rules, noise-loss
//! norms, evaluation metrics) defines a trait and a `registry()` that returns
//! its built-in implementations. Configuration files and CLI flags refer to
//! strategies by name only.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::{Error, Result};

pub struct Registry<T: ?Sized> {
    family: &'static str,
    entries: BTreeMap<&'static str, Arc<T>>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(family: &'static str) -> Self {
        Self { family, entries: BTreeMap::new() }
    }

    pub fn register(&mut self, name: &'static str, strategy: Arc<T>) -> &mut Self {
        self.entries.insert(name, strategy);
        self
    }

    pub fn get(&self, name: &str) -> Result<Arc<T>> {
        self.entries.get(name).cloned().ok_or_else(|| {
            Error::Config(format!(
                "unknown {} '{name}' (available: {})",
                self.family,
                self.names().collect::<Vec<_>>().join(", ")
            ))
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.keys().copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    trait Greeter: Send + Sync {
        fn greet(&self) -> &'static str;
    }
    struct Hi;
    impl Greeter for Hi {
        fn greet(&self) -> &'static str {
            "hi"
        }
    }

    #[test]
    fn lookup_by_name() {
        let mut r: Registry<dyn Greeter> = Registry::new("greeter");
        r.register("hi", Arc::new(Hi));
        assert_eq!(r.get("hi").unwrap().greet(), "hi");
        let err = r.get("yo").err().unwrap().to_string();
        assert!(err.contains("unknown greeter 'yo'") && err.contains("hi"), "{err}");
    }
}
