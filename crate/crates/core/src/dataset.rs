//! Labeled image collections.

use alloc::string::String;
use alloc::vec::Vec;

use crate::image::{Image, Shape};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub label: usize,
    pub image: Image,
}

impl Sample {
    /// Sample whose id is the content digest of its image.
    pub fn new(label: usize, image: Image) -> Self {
        Self { id: image.content_id(), label, image }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn shape(&self) -> Option<Shape> {
        self.samples.first().map(|s| s.image.shape)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// One more than the largest label, or zero when empty.
    pub fn class_count(&self) -> usize {
        self.samples.iter().map(|s| s.label + 1).max().unwrap_or(0)
    }

    pub fn class_histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = alloc::vec![0; classes];
        for s in &self.samples {
            if s.label < classes {
                h[s.label] += 1;
            }
        }
        h
    }

    pub fn iter(&self) -> core::slice::Iter<'_, Sample> {
        self.samples.iter()
    }
}

impl FromIterator<Sample> for Dataset {
    fn from_iter<I: IntoIterator<Item = Sample>>(iter: I) -> Self {
        Self { samples: iter.into_iter().collect() }
    }
}
