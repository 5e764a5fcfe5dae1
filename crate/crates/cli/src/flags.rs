//! Minimal `--key value` flag parsing.
//!
//! Every flag takes exactly one value. Repeated flags are kept in order:
//! [`Flags::get`] returns the last occurrence, [`Flags::all`] returns every
//! occurrence (for `--set key=value` style overrides). Anything that is not
//! a known `--flag value` pair is a usage error.

pub struct Flags {
    pairs: Vec<(String, String)>,
}

impl Flags {
    pub fn parse(args: &[String], allowed: &[&str]) -> Result<Flags, String> {
        let mut pairs = Vec::new();
        let mut it = args.iter();
        while let Some(tok) = it.next() {
            let Some(key) = tok.strip_prefix("--") else {
                return Err(format!("unexpected argument {tok:?}"));
            };
            if !allowed.contains(&key) {
                return Err(format!("unknown flag --{key}"));
            }
            let Some(value) = it.next() else {
                return Err(format!("flag --{key} needs a value"));
            };
            pairs.push((key.to_string(), value.clone()));
        }
        Ok(Flags { pairs })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a str> {
        self.pairs
            .iter()
            .filter(move |(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn pairs_parse_and_last_occurrence_wins() {
        let f = Flags::parse(&args(&["--seed", "1", "--seed", "2"]), &["seed"]).unwrap();
        assert_eq!(f.get("seed"), Some("2"));
        assert_eq!(f.get("other"), None);
    }

    #[test]
    fn repeated_flags_are_all_visible_in_order() {
        let f = Flags::parse(
            &args(&["--set", "a=1", "--set", "b=2"]),
            &["set"],
        )
        .unwrap();
        let all: Vec<&str> = f.all("set").collect();
        assert_eq!(all, ["a=1", "b=2"]);
    }

    #[test]
    fn structural_problems_are_rejected() {
        assert!(Flags::parse(&args(&["loose"]), &["seed"]).is_err());
        assert!(Flags::parse(&args(&["--bogus", "1"]), &["seed"]).is_err());
        assert!(Flags::parse(&args(&["--seed"]), &["seed"]).is_err());
    }
}
