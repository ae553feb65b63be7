use crate::error::{Error, Result};

/// Highest option count the template's letter range covers (A..F).
pub const MAX_PROMPT_OPTIONS: usize = 6;

pub const PROMPT_HEADER: &str = "Classify the query based on the required expertise. Route the query to the appropriate model for a precise response. Only output the letter corresponding to the best category (A, B, C, …, F).";
pub const PROMPT_FOOTER: &str = "Response should be only 'A', 'B', ‘C’, … or ‘F”, with no additional text.";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptOption {
    pub name: String,
    pub description: String,
}

impl PromptOption {
    pub fn new(name: impl Into<String>, description: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            description: description.into(),
        }
    }

    pub fn render(&self, letter: char) -> String {
        format!("{letter}) {} - {}", self.name, self.description)
    }
}

/// The four standard expert options, in letter order.
pub fn standard_options() -> Vec<PromptOption> {
    vec![
        PromptOption::new("Instruct", "For general guidance, explanations, or broad advice."),
        PromptOption::new("Code", "For programming-related queries, like debugging or coding."),
        PromptOption::new("Math", "For mathematical inquiries, such as problems or theories."),
        PromptOption::new(
            "Chinese Language Expert",
            "For inquiries related to the Chinese language, including translation, grammar, and usage.",
        ),
    ]
}

/// Multiple-choice routing prompt for an external instruction-following model.
pub fn render_prompt(query: &str, options: &[PromptOption]) -> Result<String> {
    if options.len() > MAX_PROMPT_OPTIONS {
        return Err(Error::InvalidArgument(format!(
            "{} options exceed the A..F letter range",
            options.len()
        )));
    }
    let opts: Vec<String> = options.iter().zip('A'..).map(|(o, l)| o.render(l)).collect();
    Ok(format!(
        "{PROMPT_HEADER}\n\nQuery: {query}\n\nOptions: {}\n\n{PROMPT_FOOTER}",
        opts.join(" ")
    ))
}

/// Maps an external model's reply to an option index. Accepts a bare letter
/// optionally wrapped in quotes, brackets or trailing punctuation.
pub fn parse_letter(reply: &str, option_count: usize) -> Result<usize> {
    let trimmed = reply.trim().trim_matches(|c: char| "'\"‘’“”()[].:".contains(c) || c.is_whitespace());
    let mut chars = trimmed.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) if c.is_ascii_alphabetic() => {
            let idx = (c.to_ascii_uppercase() as u8 - b'A') as usize;
            if idx < option_count {
                Ok(idx)
            } else {
                Err(Error::InvalidArgument(format!("letter {c} outside {option_count} options")))
            }
        }
        _ => Err(Error::InvalidArgument(format!("expected a single option letter, got {reply:?}"))),
    }
}

/// A model that answers the routing prompt with free text.
pub trait ExternalRouter {
    fn complete(&self, prompt: &str) -> Result<String>;
}

/// Renders the prompt, asks `router`, and parses the letter it returns.
pub fn route_external<R: ExternalRouter + ?Sized>(router: &R, query: &str, options: &[PromptOption]) -> Result<usize> {
    let reply = router.complete(&render_prompt(query, options)?)?;
    parse_letter(&reply, options.len())
}
