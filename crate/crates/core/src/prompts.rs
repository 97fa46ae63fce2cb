//! Prompt templates shipped as text assets, with `{name}` placeholders.

use crate::providers::ChatRequest;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Template {
    pub name: &'static str,
    pub system: &'static str,
    pub human: &'static str,
}

macro_rules! template {
    ($ident:ident, $name:literal) => {
        pub const $ident: Template = Template {
            name: $name,
            system: include_str!(concat!("../prompts/", $name, "_system.txt")),
            human: include_str!(concat!("../prompts/", $name, "_human.txt")),
        };
    };
}

template!(INDICATION, "indication");
template!(DIVERGENCE, "divergence");
template!(CONTRAINDICATION, "contraindication");
template!(ENTITY, "entity");
template!(ROLE_EDGE, "role_edge");
template!(SIMILARITY, "similarity");
template!(SOLVER, "solver");
template!(JUDGE, "judge");
template!(POLICY, "policy");

pub const ALL: [Template; 9] =
    [INDICATION, DIVERGENCE, CONTRAINDICATION, ENTITY, ROLE_EDGE, SIMILARITY, SOLVER, JUDGE, POLICY];

impl Template {
    /// Substitutes each `{key}` in the human template verbatim.
    ///
    /// Panics if a key is not a placeholder of this template; that is a
    /// programming error, not a data error.
    pub fn render(&self, vars: &[(&str, &str)]) -> String {
        for (key, _) in vars {
            let slot = format!("{{{key}}}");
            assert!(self.human.contains(&slot), "template {} has no placeholder {slot}", self.name);
        }
        // single pass so substituted values are never re-scanned
        let src = self.human.trim_end();
        let mut out = String::with_capacity(src.len());
        let mut rest = src;
        while let Some(start) = rest.find('{') {
            out.push_str(&rest[..start]);
            let after = &rest[start + 1..];
            let hit = after
                .find('}')
                .and_then(|end| vars.iter().find(|(k, _)| *k == &after[..end]).map(|(_, v)| (end, v)));
            match hit {
                Some((end, value)) => {
                    out.push_str(value);
                    rest = &after[end + 1..];
                }
                None => {
                    out.push('{');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        out
    }

    pub fn request(&self, vars: &[(&str, &str)]) -> ChatRequest {
        ChatRequest::new(self.system.trim_end(), self.render(vars))
    }

    /// Placeholder names in order of first appearance.
    pub fn placeholders(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        let mut rest = self.human;
        while let Some(start) = rest.find('{') {
            let after = &rest[start + 1..];
            match after.find('}') {
                Some(end) if after[..end].chars().all(|c| c.is_ascii_lowercase() || c == '_') && end > 0 => {
                    let name = &after[..end];
                    if !out.contains(&name) {
                        out.push(name);
                    }
                    rest = &after[end + 1..];
                }
                _ => rest = after,
            }
        }
        out
    }
}
