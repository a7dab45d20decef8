//! Named strategy registries for the pluggable pipeline stages.

use crate::edge::{EdgeDetector, SobelPyramid};
use crate::error::{Error, Result};
use crate::probmap::{CoverageMean, GlobalMax, PixelCount, ProbNormalizer};
use crate::proposals::{CandidateSource, Components, SlidingWindows};

pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: Vec<(&'static str, fn() -> Box<T>)>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self { kind, entries: Vec::new() }
    }

    /// Adds or replaces a strategy.
    pub fn register(&mut self, name: &'static str, make: fn() -> Box<T>) -> &mut Self {
        self.entries.retain(|(n, _)| *n != name);
        self.entries.push((name, make));
        self
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }

    pub fn get(&self, name: &str) -> Result<Box<T>> {
        self.entries
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, make)| make())
            .ok_or_else(|| Error::Data(format!("unknown {} `{name}` (available: {})", self.kind, self.names().join(", "))))
    }
}

pub fn edge_detectors() -> Registry<dyn EdgeDetector> {
    let mut r: Registry<dyn EdgeDetector> = Registry::new("edge detector");
    r.register("sobel2", || Box::new(SobelPyramid::two_scale()) as Box<dyn EdgeDetector>);
    r.register("sobel1", || Box::new(SobelPyramid::single_scale()) as Box<dyn EdgeDetector>);
    r
}

pub fn candidate_sources() -> Registry<dyn CandidateSource> {
    let mut r: Registry<dyn CandidateSource> = Registry::new("proposal source");
    r.register("sliding", || Box::new(SlidingWindows) as Box<dyn CandidateSource>);
    r.register("components", || Box::new(Components) as Box<dyn CandidateSource>);
    r
}

pub fn prob_normalizers() -> Registry<dyn ProbNormalizer> {
    let mut r: Registry<dyn ProbNormalizer> = Registry::new("probability normalizer");
    r.register("global-max", || Box::new(GlobalMax) as Box<dyn ProbNormalizer>);
    r.register("pixel-count", || Box::new(PixelCount) as Box<dyn ProbNormalizer>);
    r.register("coverage-mean", || Box::new(CoverageMean) as Box<dyn ProbNormalizer>);
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_resolve_to_their_names() {
        for n in edge_detectors().names() {
            assert_eq!(edge_detectors().get(n).unwrap().name(), n);
        }
        for n in candidate_sources().names() {
            assert_eq!(candidate_sources().get(n).unwrap().name(), n);
        }
        for n in prob_normalizers().names() {
            assert_eq!(prob_normalizers().get(n).unwrap().name(), n);
        }
        assert!(edge_detectors().get("canny").is_err());
    }
}
