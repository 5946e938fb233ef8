use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::simenv::scene::{Role, Scene};

/// Maps an instruction to the ids of task-relevant objects.
pub trait Resolver {
    fn resolve(&self, text: &str, scene: &Scene) -> Result<BTreeSet<usize>>;
}

/// Keyword table over the known phrasings:
///
/// * `place|put the <color> block in|into the zone` -> block and zone
/// * `pick up|grasp the <color> block` -> block
///
/// Anything else is unresolvable.
#[derive(Debug, Clone, Copy, Default)]
pub struct KeywordResolver;

enum Intent<'a> {
    Place(&'a str),
    Pick(&'a str),
}

fn parse<'a>(words: &[&'a str]) -> Option<Intent<'a>> {
    let block_color = |rest: &[&str]| -> Option<usize> {
        (rest.len() >= 3 && rest[0] == "the" && rest[2] == "block").then_some(1)
    };
    match words {
        ["place" | "put", rest @ ..] => {
            block_color(rest)?;
            match &rest[3..] {
                ["in" | "into", "the", "zone"] => Some(Intent::Place(rest[1])),
                _ => None,
            }
        }
        ["pick", "up", rest @ ..] | ["grasp", rest @ ..] => {
            block_color(rest)?;
            (rest.len() == 3).then_some(Intent::Pick(rest[1]))
        }
        _ => None,
    }
}

impl Resolver for KeywordResolver {
    fn resolve(&self, text: &str, scene: &Scene) -> Result<BTreeSet<usize>> {
        let lower = text.trim().trim_end_matches('.').to_lowercase();
        let words: Vec<&str> = lower.split_whitespace().collect();
        let unresolvable = || Error::Unresolvable(text.to_string());
        let (color, with_zone) = match parse(&words).ok_or_else(unresolvable)? {
            Intent::Place(c) => (c, true),
            Intent::Pick(c) => (c, false),
        };
        let candidates: Vec<_> = scene
            .objects
            .iter()
            .filter(|o| o.role != Role::Receptacle && o.color.name == color)
            .collect();
        // Color collisions only occur under the color-shift protocol; the
        // oracle breaks the tie in favor of the task target.
        let block = match candidates.as_slice() {
            [] => return Err(unresolvable()),
            [one] => one.id,
            many => many
                .iter()
                .find(|o| o.role == Role::Target)
                .map(|o| o.id)
                .ok_or_else(unresolvable)?,
        };
        let mut out = BTreeSet::from([block]);
        if with_zone {
            out.insert(scene.receptacle().ok_or_else(unresolvable)?.id);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simenv::scene::{reset, DistractionLevel, TaskId};

    #[test]
    fn place_phrasing_resolves_block_and_zone() {
        let s = reset(4, DistractionLevel::Mild, TaskId::Place);
        let t = s.target();
        let text = format!("place the {} block in the zone", t.color.name);
        let ids = KeywordResolver.resolve(&text, &s).unwrap();
        assert_eq!(ids, BTreeSet::from([t.id, s.receptacle().unwrap().id]));
        let alt = format!("Put the {} block into the zone.", t.color.name);
        assert_eq!(KeywordResolver.resolve(&alt, &s).unwrap(), ids);
    }

    #[test]
    fn pick_phrasing_resolves_block_only() {
        let s = reset(4, DistractionLevel::Mild, TaskId::Pick);
        let ids = KeywordResolver.resolve(&s.instruction, &s).unwrap();
        assert_eq!(ids, BTreeSet::from([s.target().id]));
    }

    #[test]
    fn nonsense_is_unresolvable() {
        let s = reset(4, DistractionLevel::Clean, TaskId::Place);
        for text in ["xyzzy", "place the block", "place the chartreuse block in the zone"] {
            assert!(matches!(KeywordResolver.resolve(text, &s), Err(Error::Unresolvable(_))), "{text}");
        }
    }

    #[test]
    fn invariant_to_distractor_count() {
        for seed in 0..30 {
            let sets: Vec<_> = DistractionLevel::ALL
                .iter()
                .map(|&l| {
                    let s = reset(seed, l, TaskId::Place);
                    KeywordResolver.resolve(&s.instruction, &s).unwrap()
                })
                .collect();
            assert!(sets.windows(2).all(|w| w[0] == w[1]), "seed {seed}");
        }
    }
}
