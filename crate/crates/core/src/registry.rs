//! Name-keyed registries of interchangeable strategies.
//!
//! Every pluggable piece of the pipeline (optimizers, training objectives,
//! ensemble combiners, sentence scorers, per-source cleaners, model
//! families) sits behind a trait object and is looked up by the name that
//! appears in run configs.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

type Factory<T, A> = Box<dyn Fn(&A) -> Result<Box<T>> + Send + Sync>;

/// Maps a name to a constructor producing a boxed trait object.
///
/// `A` is the argument handed to the constructor, typically a slice of the
/// resolved run config.
pub struct Registry<T: ?Sized, A = ()> {
    kind: &'static str,
    factories: BTreeMap<String, Factory<T, A>>,
}

impl<T: ?Sized, A> Registry<T, A> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            factories: BTreeMap::new(),
        }
    }

    /// Registers `factory` under `name`, replacing any previous entry.
    pub fn register<F>(&mut self, name: &str, factory: F) -> &mut Self
    where
        F: Fn(&A) -> Result<Box<T>> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Box::new(factory));
        self
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    pub fn names(&self) -> Vec<String> {
        self.factories.keys().cloned().collect()
    }

    pub fn create(&self, name: &str, args: &A) -> Result<Box<T>> {
        match self.factories.get(name) {
            Some(factory) => factory(args),
            None => Err(Error::UnknownName {
                kind: self.kind,
                name: name.to_string(),
                known: self.names(),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    trait Greeter {
        fn greet(&self) -> String;
    }

    struct Plain(String);

    impl Greeter for Plain {
        fn greet(&self) -> String {
            format!("hello {}", self.0)
        }
    }

    #[test]
    fn creates_registered_and_rejects_unknown() {
        let mut reg: Registry<dyn Greeter, String> = Registry::new("greeter");
        reg.register("plain", |who: &String| Ok(Box::new(Plain(who.clone()))));
        let g = reg.create("plain", &"bob".to_string()).unwrap();
        assert_eq!(g.greet(), "hello bob");
        match reg.create("fancy", &String::new()) {
            Err(Error::UnknownName { known, .. }) => assert_eq!(known, vec!["plain"]),
            _ => panic!("expected UnknownName"),
        }
    }
}
