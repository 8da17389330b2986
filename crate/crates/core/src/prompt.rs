//! Canonical generation prompt.
//!
//! The templates below are the exact text sent to the model. `{n_samples}`,
//! `{n_examples}` and `{examples}` are the only placeholders.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::examples::{render_example, ExampleSet};

pub const SAMPLE_SEPARATOR: &str = "<SAMPLE_SEPARATOR/>";

pub const SYSTEM_TEMPLATE: &str = "You are a meticulous AI researcher conducting an important investigation into a specific feature inside a language model that activates in response to text inputs. Your overall task is to generate additional text samples that cause the feature to strongly activate.

You will receive a list of text examples on which the feature activates. Specific tokens causing activation will appear between delimiters like {{this}}. Consecutive activating tokens will also be accordingly delimited {{just like this}}. If no tokens are highlighted with {}, then the feature does not activate on any tokens in the input.

Note: features activate on a word-by-word basis. Also, feature activations can only depend on words before the word it activates on.";

pub const USER_TEMPLATE: &str = "Consider the feature that activates when the given examples below are present. Your task is to generate text samples that strongly activate this feature. Study the examples carefully to identify both their shared and varying traits. Your generated samples should:
- Preserve any consistent traits, patterns, or constraints present across all examples
- Match the diversity level shown in the examples---neither more diverse nor more uniform
- Vary along the same dimensions that the examples vary (e.g., if examples differ in tone but share a topic, maintain that pattern)
- Avoid introducing new types of variation not present in the example set
- Avoid collapsing into repetitive or overly similar outputs

Generate exactly {n_samples} new samples separated by <SAMPLE_SEPARATOR/>. Note that the feature may involve semantic content, grammatical structures, abstract concepts, specific named entities (e.g., people, organizations, locations), or formatting elements like newlines, punctuation, citations, or special characters, for example, {{\\n}}, or {{↵}} represent newlines, {{,}} represents commas, {{-}} represents hyphens, etc that are activating the feature. Present each sample without numbering or bullets.
Important: place <SAMPLE_SEPARATOR/> between generated samples.

See the following {n_examples} examples that activate the feature, separated by
<SAMPLE_SEPARATOR/>:
{examples}";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestParams {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for RequestParams {
    fn default() -> Self {
        Self {
            model: "gpt-4.1-mini".into(),
            temperature: 1.0,
            max_tokens: 2048,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_text: String,
    pub user_text: String,
    pub example_count: usize,
    pub n_samples: usize,
    pub request_params: RequestParams,
}

/// Instantiates the templates for one feature's examples. Only rendered
/// example text enters the prompt.
pub fn build_prompt(examples: &ExampleSet, n_samples: usize, params: &RequestParams) -> PromptBundle {
    let mut block = String::new();
    for ex in examples.examples() {
        block.push('\n');
        block.push_str(SAMPLE_SEPARATOR);
        block.push('\n');
        block.push_str(&render_example(ex));
        block.push('\n');
    }
    let user_text = USER_TEMPLATE
        .replace("{n_samples}", &n_samples.to_string())
        .replace("{n_examples}", &examples.len().to_string())
        .replace("{examples}", &block);
    PromptBundle {
        system_text: SYSTEM_TEMPLATE.to_owned(),
        user_text,
        example_count: examples.len(),
        n_samples,
        request_params: params.clone(),
    }
}

/// Hex SHA-256 over both templates, recorded in run manifests.
pub fn template_hash() -> String {
    let mut h = Sha256::new();
    h.update(SYSTEM_TEMPLATE.as_bytes());
    h.update([0u8]);
    h.update(USER_TEMPLATE.as_bytes());
    hex::encode(h.finalize())
}
