//! `${name}` placeholders in binding strings. `$${` is a literal `${`.

use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("unterminated placeholder in {0:?}")]
    Unterminated(String),
    #[error("empty placeholder name in {0:?}")]
    EmptyName(String),
    #[error("unknown placeholder ${{{0}}}")]
    Unknown(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece<'a> {
    Text(&'a str),
    Param(&'a str),
}

fn pieces(template: &str) -> Result<Vec<Piece<'_>>, TemplateError> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(pos) = rest.find('$') {
        let tail = &rest[pos..];
        if tail.starts_with("$${") {
            out.push(Piece::Text(&rest[..pos]));
            out.push(Piece::Text("${"));
            rest = &tail[3..];
        } else if let Some(body) = tail.strip_prefix("${") {
            out.push(Piece::Text(&rest[..pos]));
            let end = body.find('}').ok_or_else(|| TemplateError::Unterminated(template.into()))?;
            let name = &body[..end];
            if name.is_empty() {
                return Err(TemplateError::EmptyName(template.into()));
            }
            out.push(Piece::Param(name));
            rest = &body[end + 1..];
        } else {
            out.push(Piece::Text(&rest[..pos + 1]));
            rest = &tail[1..];
        }
    }
    out.push(Piece::Text(rest));
    Ok(out)
}

/// Names referenced by a template, in order of appearance.
pub fn placeholders(template: &str) -> Result<Vec<&str>, TemplateError> {
    Ok(pieces(template)?
        .into_iter()
        .filter_map(|p| match p {
            Piece::Param(name) => Some(name),
            Piece::Text(_) => None,
        })
        .collect())
}

/// Replaces every placeholder using `lookup`.
pub fn substitute<'v, F>(template: &str, mut lookup: F) -> Result<String, TemplateError>
where
    F: FnMut(&str) -> Option<&'v str>,
{
    let mut out = String::with_capacity(template.len());
    for piece in pieces(template)? {
        match piece {
            Piece::Text(t) => out.push_str(t),
            Piece::Param(name) => out.push_str(lookup(name).ok_or_else(|| TemplateError::Unknown(name.into()))?),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn finds_names() {
        assert_eq!(placeholders("temp=${T} size=${size}").unwrap(), vec!["T", "size"]);
        assert_eq!(placeholders("cost $5 and $${literal}").unwrap(), Vec::<&str>::new());
        assert!(matches!(placeholders("${open"), Err(TemplateError::Unterminated(_))));
        assert!(matches!(placeholders("${}"), Err(TemplateError::EmptyName(_))));
    }

    #[test]
    fn substitutes() {
        let s = substitute("temp=${T}K $${T} $", |n| (n == "T").then_some("300")).unwrap();
        assert_eq!(s, "temp=300K ${T} $");
        assert_eq!(substitute("${X}", |_| None).unwrap_err(), TemplateError::Unknown("X".into()));
    }
}
