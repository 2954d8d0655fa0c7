//! Name → factory tables for runtime-selected strategies (optimizers,
//! training regimes, expert loaders).

use crate::error::{CoreError, Result};

type Factory<T> = Box<dyn Fn() -> Box<T> + Send + Sync>;

pub struct Registry<T: ?Sized> {
    what: &'static str,
    factories: Vec<(&'static str, Factory<T>)>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(what: &'static str) -> Self {
        Self {
            what,
            factories: Vec::new(),
        }
    }

    /// Registers `name`, replacing any previous factory under that name.
    pub fn register<F>(&mut self, name: &'static str, factory: F) -> &mut Self
    where
        F: Fn() -> Box<T> + Send + Sync + 'static,
    {
        self.factories.retain(|(n, _)| *n != name);
        self.factories.push((name, Box::new(factory)));
        self
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.factories.iter().map(|(n, _)| *n).collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.iter().any(|(n, _)| *n == name)
    }

    pub fn create(&self, name: &str) -> Result<Box<T>> {
        self.factories
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, f)| f())
            .ok_or_else(|| CoreError::UnknownStrategy {
                what: self.what,
                name: name.to_string(),
                known: self.names().join(", "),
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    trait Greeter {
        fn hi(&self) -> String;
    }
    struct En;
    impl Greeter for En {
        fn hi(&self) -> String {
            "hi".into()
        }
    }
    struct Fr;
    impl Greeter for Fr {
        fn hi(&self) -> String {
            "salut".into()
        }
    }

    #[test]
    fn create_by_name_and_unknown() {
        let mut r: Registry<dyn Greeter> = Registry::new("greeter");
        r.register("en", || Box::new(En)).register("fr", || Box::new(Fr));
        assert_eq!(r.create("fr").unwrap().hi(), "salut");
        assert_eq!(r.names(), vec!["en", "fr"]);
        match r.create("de") {
            Err(CoreError::UnknownStrategy { name, known, .. }) => {
                assert_eq!(name, "de");
                assert_eq!(known, "en, fr");
            }
            _ => panic!("expected UnknownStrategy"),
        }
        r.register("en", || Box::new(Fr));
        assert_eq!(r.create("en").unwrap().hi(), "salut");
        assert_eq!(r.names().len(), 2);
    }
}
