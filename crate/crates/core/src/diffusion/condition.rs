use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Camera;

/// Subject token 0: generic subject.
pub const SUBJECT_GENERIC: u16 = 0;
/// Style token 0: no style.
pub const STYLE_NONE: u16 = 0;
/// Style token of the shared theme prompt ("in the style of [V]").
pub const STYLE_THEME: u16 = 1;
/// Style token of the concept identifier prompt ("a 3D model of [V] ...").
pub const STYLE_CONCEPT: u16 = 2;
/// Attribute token 0: no attribute.
pub const ATTRIBUTE_NONE: u16 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Color,
    Normal,
}

impl Modality {
    pub fn index(self) -> usize {
        match self {
            Modality::Color => 0,
            Modality::Normal => 1,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Modality::Color),
            1 => Ok(Modality::Normal),
            _ => Err(Error::invalid(format!("unknown modality index {i}"))),
        }
    }
}

/// Token-tuple prompt: subject, style identifier, optional attribute,
/// modality, optional camera embedding, and the classifier-free null flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub subject: u16,
    pub style: u16,
    pub attribute: u16,
    pub modality: Modality,
    pub camera: Option<[f64; 4]>,
    pub null: bool,
}

/// Sizes of the token vocabularies understood by the toy backends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Vocab {
    pub subjects: usize,
    pub styles: usize,
    pub attributes: usize,
}

impl Default for Vocab {
    fn default() -> Self {
        Self { subjects: 8, styles: 4, attributes: 8 }
    }
}

impl Vocab {
    /// Length of the condition feature vector: one-hot subject, style,
    /// attribute and modality, the 4 camera values, and the null flag.
    pub fn feature_len(&self) -> usize {
        self.subjects + self.styles + self.attributes + 2 + 4 + 1
    }

    pub fn check(&self, c: &Condition) -> Result<()> {
        if c.null {
            return Ok(());
        }
        if c.subject as usize >= self.subjects
            || c.style as usize >= self.styles
            || c.attribute as usize >= self.attributes
        {
            return Err(Error::invalid(format!(
                "condition tokens (subject {}, style {}, attribute {}) outside vocabulary {}x{}x{}",
                c.subject, c.style, c.attribute, self.subjects, self.styles, self.attributes
            )));
        }
        Ok(())
    }

    pub fn features(&self, c: &Condition) -> Vec<f64> {
        let mut e = vec![0.0; self.feature_len()];
        if c.null {
            *e.last_mut().expect("non-empty") = 1.0;
            return e;
        }
        let mut o = 0;
        e[o + c.subject as usize] = 1.0;
        o += self.subjects;
        e[o + c.style as usize] = 1.0;
        o += self.styles;
        e[o + c.attribute as usize] = 1.0;
        o += self.attributes;
        e[o + c.modality.index()] = 1.0;
        o += 2;
        if let Some(cam) = c.camera {
            e[o..o + 4].copy_from_slice(&cam);
        }
        e
    }
}

impl Condition {
    pub fn new(subject: u16, style: u16, modality: Modality) -> Self {
        Self { subject, style, attribute: ATTRIBUTE_NONE, modality, camera: None, null: false }
    }

    /// The unconditional prompt; every other component is zeroed.
    pub fn null() -> Self {
        Self {
            subject: 0,
            style: 0,
            attribute: 0,
            modality: Modality::Color,
            camera: None,
            null: true,
        }
    }

    pub fn with_camera(mut self, camera: &Camera) -> Self {
        if !self.null {
            self.camera = Some(camera.embedding());
        }
        self
    }

    pub fn with_camera_embedding(mut self, camera: Option<[f64; 4]>) -> Self {
        if !self.null {
            self.camera = camera;
        }
        self
    }

    pub fn without_camera(mut self) -> Self {
        self.camera = None;
        self
    }

    pub fn with_modality(mut self, modality: Modality) -> Self {
        if !self.null {
            self.modality = modality;
        }
        self
    }

    pub fn with_style(mut self, style: u16) -> Self {
        if !self.null {
            self.style = style;
        }
        self
    }

    pub fn with_attribute(mut self, attribute: u16) -> Self {
        if !self.null {
            self.attribute = attribute;
        }
        self
    }

    /// The null counterpart used for the classifier-free pass.
    pub fn to_null(self) -> Self {
        Self::null()
    }
}
