//! OAuth scope strings with hierarchical narrowing.
//!
//! A granted token `g` covers a requested token `r` when they are equal or
//! when `r` starts with `g:`; `calendar` covers `calendar:view` but not the
//! other way round.

use std::collections::BTreeSet;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScopeError {
    #[error("scope is empty")]
    Empty,
    #[error("scope token `{0}` appears more than once")]
    Duplicate(String),
}

/// Splits a space-separated scope string, rejecting empty and repeated tokens.
pub fn parse_scope(scope: &str) -> Result<Vec<&str>, ScopeError> {
    let mut seen = BTreeSet::new();
    let mut tokens = Vec::new();
    for token in scope.split_ascii_whitespace() {
        if !seen.insert(token) {
            return Err(ScopeError::Duplicate(token.to_owned()));
        }
        tokens.push(token);
    }
    if tokens.is_empty() {
        return Err(ScopeError::Empty);
    }
    Ok(tokens)
}

pub fn scope_covers<'a, I>(granted: I, requested: &str) -> bool
where
    I: IntoIterator<Item = &'a str>,
{
    granted.into_iter().any(|g| {
        requested == g
            || (requested.len() > g.len() + 1
                && requested.starts_with(g)
                && requested.as_bytes()[g.len()] == b':')
    })
}

/// Returns the tokens of `child` that `parent` does not cover. An empty
/// result means the child scope is a valid reduction of the parent.
pub fn check_scope_reduction(parent: &str, child: &str) -> Result<Vec<String>, ScopeError> {
    let granted = parse_scope(parent)?;
    let requested = parse_scope(child)?;
    Ok(requested
        .into_iter()
        .filter(|token| !scope_covers(granted.iter().copied(), token))
        .map(str::to_owned)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hierarchical_narrowing() {
        assert!(scope_covers(["email", "calendar"], "calendar:view"));
        assert!(scope_covers(["email"], "email"));
        assert!(!scope_covers(["calendar:view"], "calendar"));
        assert!(!scope_covers(["cal"], "calendar"));
        assert!(!scope_covers(["calendar"], "calendar:"));
    }

    #[test]
    fn reduction_examples() {
        assert_eq!(check_scope_reduction("email calendar", "calendar:view").unwrap(), Vec::<String>::new());
        assert!(check_scope_reduction("email profile calendar", "email profile calendar")
            .unwrap()
            .is_empty());
        assert_eq!(check_scope_reduction("email", "email admin").unwrap(), vec!["admin"]);
    }

    #[test]
    fn malformed_scopes() {
        assert_eq!(check_scope_reduction("", "email"), Err(ScopeError::Empty));
        assert_eq!(check_scope_reduction("email", "   "), Err(ScopeError::Empty));
        assert_eq!(
            check_scope_reduction("email email", "email"),
            Err(ScopeError::Duplicate("email".into()))
        );
    }
}
