use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Category {
    #[serde(rename = "benign")]
    Benign,
    #[serde(rename = "pre-malignant")]
    PreMalignant,
    #[serde(rename = "malignant")]
    Malignant,
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Benign => "benign",
            Category::PreMalignant => "pre-malignant",
            Category::Malignant => "malignant",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub class_id: String,
    pub display_name: String,
    pub category: Category,
}

/// Ordered class list. The order is the global tie-break order: when two
/// scores are equal, the class with the lower index ranks first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ClassInfo>", into = "Vec<ClassInfo>")]
pub struct ClassTaxonomy {
    classes: Vec<ClassInfo>,
}

impl ClassTaxonomy {
    pub fn new(classes: Vec<ClassInfo>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::data("taxonomy has no classes"));
        }
        let mut seen = HashSet::new();
        for c in &classes {
            if c.class_id.is_empty() {
                return Err(Error::data("taxonomy contains an empty class_id"));
            }
            if !seen.insert(c.class_id.as_str()) {
                return Err(Error::data(format!(
                    "duplicate class_id '{}' in taxonomy",
                    c.class_id
                )));
            }
        }
        Ok(Self { classes })
    }

    /// The six skin conditions, benign to malignant.
    pub fn skin_default() -> Self {
        use Category::*;
        let c = |id: &str, name: &str, category| ClassInfo {
            class_id: id.into(),
            display_name: name.into(),
            category,
        };
        Self {
            classes: vec![
                c("seborrheic_keratosis", "Seborrheic keratosis", Benign),
                c("lentigo", "Lentigo", Benign),
                c("actinic_keratosis", "Actinic keratosis", PreMalignant),
                c(
                    "atypical_melanocytic_nevus",
                    "Atypical melanocytic nevus",
                    PreMalignant,
                ),
                c("basal_cell_carcinoma", "Basal cell carcinoma", Malignant),
                c("melanoma", "Melanoma", Malignant),
            ],
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[ClassInfo] {
        &self.classes
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.classes.iter().map(|c| c.class_id.as_str())
    }

    pub fn index_of(&self, class_id: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.class_id == class_id)
    }

    pub fn require_index(&self, class_id: &str) -> Result<usize> {
        self.index_of(class_id)
            .ok_or_else(|| Error::data(format!("unknown class '{class_id}'")))
    }

    pub fn get(&self, class_id: &str) -> Option<&ClassInfo> {
        self.classes.iter().find(|c| c.class_id == class_id)
    }

    pub fn class_at(&self, index: usize) -> &ClassInfo {
        &self.classes[index]
    }

    /// Copy of the taxonomy without the given class (used to hold a class out).
    pub fn without(&self, class_id: &str) -> Result<Self> {
        Self::new(
            self.classes
                .iter()
                .filter(|c| c.class_id != class_id)
                .cloned()
                .collect(),
        )
    }
}

impl TryFrom<Vec<ClassInfo>> for ClassTaxonomy {
    type Error = Error;

    fn try_from(v: Vec<ClassInfo>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ClassTaxonomy> for Vec<ClassInfo> {
    fn from(t: ClassTaxonomy) -> Self {
        t.classes
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_taxonomy_order_and_categories() {
        let t = ClassTaxonomy::skin_default();
        assert_eq!(t.len(), 6);
        assert_eq!(t.index_of("seborrheic_keratosis"), Some(0));
        assert_eq!(t.index_of("melanoma"), Some(5));
        let cats: Vec<Category> = t.classes().iter().map(|c| c.category).collect();
        assert_eq!(
            cats,
            vec![
                Category::Benign,
                Category::Benign,
                Category::PreMalignant,
                Category::PreMalignant,
                Category::Malignant,
                Category::Malignant
            ]
        );
        assert_eq!(t.get("lentigo").unwrap().display_name, "Lentigo");
    }

    #[test]
    fn rejects_duplicates_and_empty_ids() {
        let mut classes = ClassTaxonomy::skin_default().classes().to_vec();
        classes[1].class_id = classes[0].class_id.clone();
        assert!(ClassTaxonomy::new(classes.clone()).is_err());
        classes[1].class_id = String::new();
        assert!(ClassTaxonomy::new(classes).is_err());
    }

    #[test]
    fn serde_uses_category_spelling() {
        let json = serde_json::to_string(&ClassTaxonomy::skin_default()).unwrap();
        assert!(json.contains("\"pre-malignant\""));
        let back: ClassTaxonomy = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ClassTaxonomy::skin_default());
    }
}
