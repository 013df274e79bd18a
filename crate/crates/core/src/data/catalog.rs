use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{json_error, read, simmc, CatalogObject, DataError, IdRepr};

/// Catalog keyed by object id, in file order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Catalog {
    pub objects: IndexMap<String, CatalogObject>,
}

impl Catalog {
    pub fn get(&self, id: &str) -> Option<&CatalogObject> {
        self.objects.get(id)
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &CatalogObject> {
        self.objects.values()
    }

    /// Adds an object after validating it. Duplicate ids are rejected.
    pub fn insert(&mut self, object: CatalogObject, origin: &str) -> Result<(), DataError> {
        let index = self.objects.len();
        object
            .validate()
            .map_err(|(location, msg)| DataError::Invalid {
                path: origin.to_string(),
                location: format!("objects[{index}] ({:?}).{location}", object.object_id),
                msg,
            })?;
        if self.objects.contains_key(&object.object_id) {
            return Err(DataError::DuplicateId {
                path: origin.to_string(),
                id: object.object_id,
            });
        }
        self.objects.insert(object.object_id.clone(), object);
        Ok(())
    }
}

#[derive(Deserialize)]
struct CatalogIn {
    objects: Vec<ObjectIn>,
}

#[derive(Deserialize)]
struct ObjectIn {
    id: IdRepr,
    attributes: IndexMap<String, Vec<String>>,
}

#[derive(Serialize)]
struct CatalogOut<'a> {
    objects: Vec<ObjectOut<'a>>,
}

#[derive(Serialize)]
struct ObjectOut<'a> {
    id: &'a str,
    attributes: &'a IndexMap<String, Vec<String>>,
}

/// Parses either the simplified `{"objects": [...]}` layout or the SIMMC
/// metadata layout. `origin` names the source in errors.
pub fn parse_catalog(text: &str, origin: &str) -> Result<Catalog, DataError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| json_error(origin, e))?;
    if value.get("objects").is_none() {
        return simmc::catalog_from_value(&value, origin);
    }
    let file: CatalogIn = serde_json::from_str(text).map_err(|e| json_error(origin, e))?;
    let mut catalog = Catalog::default();
    for entry in file.objects {
        catalog.insert(
            CatalogObject {
                object_id: entry.id.into_string(),
                attributes: entry.attributes,
            },
            origin,
        )?;
    }
    Ok(catalog)
}

pub fn load_catalog(path: &Path) -> Result<Catalog, DataError> {
    parse_catalog(&read(path)?, &path.display().to_string())
}

/// Simplified-layout JSON, objects and attributes in catalog order.
pub fn catalog_to_json(catalog: &Catalog) -> String {
    let file = CatalogOut {
        objects: catalog
            .iter()
            .map(|o| ObjectOut {
                id: &o.object_id,
                attributes: &o.attributes,
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&file).expect("catalog serializes");
    s.push('\n');
    s
}
