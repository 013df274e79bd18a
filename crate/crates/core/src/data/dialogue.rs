use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{json_error, read, simmc, Catalog, DataError, IdRepr, Turn};

#[derive(Deserialize)]
struct DialoguesIn {
    dialogues: Vec<DialogueIn>,
}

#[derive(Deserialize)]
struct DialogueIn {
    id: IdRepr,
    turns: Vec<TurnIn>,
}

#[derive(Deserialize)]
struct TurnIn {
    user: String,
    object_id: IdRepr,
    response: String,
}

#[derive(Serialize)]
struct DialoguesOut<'a> {
    dialogues: Vec<DialogueOut<'a>>,
}

#[derive(Serialize)]
struct DialogueOut<'a> {
    id: &'a str,
    turns: Vec<TurnOut<'a>>,
}

#[derive(Serialize)]
struct TurnOut<'a> {
    user: &'a str,
    object_id: &'a str,
    response: &'a str,
}

/// Resolves every turn's object against the catalog.
pub(crate) fn check_references(
    turns: &[Turn],
    catalog: &Catalog,
    origin: &str,
) -> Result<(), DataError> {
    for t in turns {
        if catalog.get(&t.referred_object_id).is_none() {
            return Err(DataError::DanglingObject {
                path: origin.to_string(),
                dialogue_id: t.dialogue_id.clone(),
                turn_index: t.turn_index,
                object_id: t.referred_object_id.clone(),
            });
        }
    }
    Ok(())
}

/// Parses the simplified `{"dialogues": [...]}` layout or the SIMMC
/// `{"dialogue_data": [...]}` layout into one [`Turn`] per exchange.
pub fn parse_dialogues(
    text: &str,
    catalog: &Catalog,
    origin: &str,
) -> Result<Vec<Turn>, DataError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| json_error(origin, e))?;
    let turns = if value.get("dialogue_data").is_some() {
        simmc::turns_from_value(&value, origin)?
    } else {
        let file: DialoguesIn = serde_json::from_str(text).map_err(|e| json_error(origin, e))?;
        file.dialogues
            .into_iter()
            .flat_map(|d| {
                let id = d.id.into_string();
                d.turns.into_iter().enumerate().map(move |(i, t)| Turn {
                    dialogue_id: id.clone(),
                    turn_index: i,
                    user_utterance: t.user,
                    referred_object_id: t.object_id.into_string(),
                    true_response: t.response,
                })
            })
            .collect()
    };
    check_references(&turns, catalog, origin)?;
    Ok(turns)
}

pub fn load_dialogues(path: &Path, catalog: &Catalog) -> Result<Vec<Turn>, DataError> {
    parse_dialogues(&read(path)?, catalog, &path.display().to_string())
}

/// Simplified-layout JSON. Consecutive turns sharing a dialogue id are
/// grouped into one dialogue.
pub fn dialogues_to_json(turns: &[Turn]) -> String {
    let mut dialogues: Vec<DialogueOut<'_>> = Vec::new();
    for t in turns {
        let turn = TurnOut {
            user: &t.user_utterance,
            object_id: &t.referred_object_id,
            response: &t.true_response,
        };
        match dialogues.last_mut() {
            Some(d) if d.id == t.dialogue_id => d.turns.push(turn),
            _ => dialogues.push(DialogueOut {
                id: &t.dialogue_id,
                turns: vec![turn],
            }),
        }
    }
    let mut s =
        serde_json::to_string_pretty(&DialoguesOut { dialogues }).expect("dialogues serialize");
    s.push('\n');
    s
}
