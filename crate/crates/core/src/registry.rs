//! Name-keyed strategy registries.
//!
//! Interchangeable behaviours (token scorers, client attack profiles, RSU
//! fault modes) are registered under a short name and constructed at runtime
//! from a spec string of the form `name` or `name:arg`.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

type Factory<T> = Box<dyn Fn(Option<&str>) -> Result<T> + Send + Sync>;

pub struct Registry<T> {
    kind: &'static str,
    factories: BTreeMap<&'static str, Factory<T>>,
}

impl<T> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            factories: BTreeMap::new(),
        }
    }

    /// Registers a constructor. A later registration under the same name
    /// replaces the earlier one.
    pub fn register<F>(&mut self, name: &'static str, factory: F) -> &mut Self
    where
        F: Fn(Option<&str>) -> Result<T> + Send + Sync + 'static,
    {
        self.factories.insert(name, Box::new(factory));
        self
    }

    /// Builds a strategy from `name` or `name:arg`.
    pub fn build(&self, spec: &str) -> Result<T> {
        let spec = spec.trim();
        let (name, arg) = match spec.split_once(':') {
            Some((n, a)) => (n.trim(), Some(a.trim())),
            None => (spec, None),
        };
        let factory = self.factories.get(name).ok_or_else(|| Error::UnknownStrategy {
            kind: self.kind,
            name: name.to_string(),
        })?;
        factory(arg)
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.factories.keys().copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }
}

impl<T> fmt::Debug for Registry<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry")
            .field("kind", &self.kind)
            .field("names", &self.factories.keys().collect::<Vec<_>>())
            .finish()
    }
}

pub(crate) fn parse_arg<V: std::str::FromStr>(
    kind: &'static str,
    name: &str,
    arg: Option<&str>,
    default: V,
) -> Result<V> {
    match arg {
        None | Some("") => Ok(default),
        Some(a) => a
            .parse()
            .map_err(|_| Error::Config(format!("{kind} strategy `{name}`: cannot parse argument `{a}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_by_name_and_argument() {
        let mut r: Registry<i64> = Registry::new("number");
        r.register("one", |_| Ok(1))
            .register("scaled", |a| parse_arg("number", "scaled", a, 2i64).map(|v| v * 10));
        assert_eq!(r.build("one").unwrap(), 1);
        assert_eq!(r.build("scaled").unwrap(), 20);
        assert_eq!(r.build(" scaled : 4 ").unwrap(), 40);
        assert!(matches!(r.build("nope"), Err(Error::UnknownStrategy { .. })));
        assert!(matches!(r.build("scaled:x"), Err(Error::Config(_))));
        assert_eq!(r.names().collect::<Vec<_>>(), vec!["one", "scaled"]);
    }
}
