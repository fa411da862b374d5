//! Prompt templates for every generation stage. Wording (including the
//! original typos) is part of the protocol; render functions only fill
//! slots and never reorder or rephrase.

use crate::types::{Demonstration, Instruction};

pub const ATTRIBUTE_ENUMERATION_HEAD: &str =
    "Instruction: Given the following input, what kind of sentiment-related attributes does it have?";

/// Attribute enumeration prompt for one user text.
pub fn render_attribute_enumeration(text: &str) -> String {
    format!(
        "{ATTRIBUTE_ENUMERATION_HEAD}\n\
         \n\
         Requirements:\n\
         \n\
         1. Please brainstorm as many related attributes as possible.\n\
         2. Be creative. Any interesting perspectives are welcome!\n\
         3. Each attribute should typically reflect a particular characteristic of the input text.\n\
         4. Each attribute should be followed with Attribute Description (a brief description of what the attribute represents) and Attribute Value (the corresponding attribute value as reflected in the text).\n\
         5. Feel free to ignore the tedious and specific content. Just focus on some general textual attributes!\n\
         \n\
         Input: {text}\n\
         \n\
         Attribute:"
    )
}

pub const OPEN_TASK_HEAD: &str =
    "Please generate prompts for analyzing subjective texts such as product reviews or social media according to the following rules:";

/// Open-ended task generation prompt. Takes the perspective name and up to
/// five (attribute, brief explanation) pairs drawn from its members.
pub fn render_open_task_generation(perspective: &str, explanations: &[(String, String)]) -> String {
    let mut out = String::new();
    out.push_str(OPEN_TASK_HEAD);
    out.push('\n');
    out.push_str(&format!(
        "1. Each prompt should capture the core and commonalities of the following attribute categories and without relying on specific attribute: {perspective}.\n"
    ));
    for (attr, expl) in explanations.iter().take(5) {
        out.push_str(&format!("    - The explanation for {attr} is {expl}.\n"));
    }
    out.push_str(
        "2. Ensure that each prompt is domain-general by using neutral references such as \"this text\" avoiding any specific domain indications.\n\
         3. Each prompt should be designed to help better understand subjective texts by deconstructing it based on the specified attribute categories.\n\
         4. Employ diverse strategies, which may include but are not limited to:\n\
         \x20   - Open-ended deconstruction instructions\n\
         \x20   - Diagnostic questions\n\
         5. Ensure that your responses are structured in ordered numbers.\n\
         \n\
         Generated prompt:",
    );
    out
}

pub const CONSTRAINED_TASK_HEAD: &str =
    "I want you to focus on the following text attribute:";

/// Constrained task generation prompt for one perspective with its brief
/// explanation.
pub fn render_constrained_task_generation(perspective: &str, explanation: &str) -> String {
    format!(
        "{CONSTRAINED_TASK_HEAD} **{perspective}({explanation})**, and systematically generate a diverse range of tasks that target a single text. Please make sure each task includes the following elements:\n\
         \x20   - Task Name: a concise title that captures the core goal or theme of the task.\n\
         \x20   - Task Description: an explanation of the problem this task aims to solve or the objective it aims to achieve.\n\
         The task types should be diverse, such as:\n\
         1. Classification\n\
         \x20   - Closed-set categories classification\n\
         \x20   - Open-ended categories classification\n\
         2. Scoring or Rating\n\
         \x20   - Quantitative scales\n\
         3. Information Extraction\n\
         \x20   - Keywords, key sentences, triggers\n\
         \x20   - Root causes, contextual dependencies, and more\n\
         4. Structured Output\n\
         \x20   - JSON, tables, or other machine-readable formats\n\
         \x20   - Potentially includes multiple fields (roles, attribute values, etc.)\n\
         When designing these tasks, please follow these guidelines:\n\
         \x20   - Clarity: Each task's goal should be described methodically.\n\
         \x20   - Diversity: Aim for a wide range of creative ideas across classification, scoring, extraction, and extended analyses.\n\
         \x20   - All tasks must target a single text. Therefore, do not generate tasks involving comparisons between two texts.\n\
         Based on the above requirements, please list several diverse tasks focused on **{perspective}**.\n\
         Present your output in the following structured JSON format, ensuring that it can be directly parsed."
    )
}

pub const INSTRUCTION_REWRITE_HEAD: &str =
    "Please rewrite the task based on the task name and description, making the task definition more standardized and normalized.";

/// Instruction synthesis prompt for one task.
pub fn render_instruction_rewrite(task_name: &str, task_description: &str) -> String {
    format!(
        "{INSTRUCTION_REWRITE_HEAD}\n\
         \n\
         Task Name: {task_name}\n\
         Task Description:{task_description}\n\
         \n\
         Below are the specific requirements and guidelines:\n\
         1. Avoiding Ambiguity: Ensure task description, requirement and constraint is precise, complete, and free of ambiguity. If the task contains two direction, specify one direction in the task description and requirments and you should NOT add any requirments in input.\n\
         \n\
         2. Ensure the rewritten task is consistent with the original task description.\n\
         \n\
         3. Task Elements: Ensure that each task definition includes the following components:\n\
         \x20   - Task Name: A concise title of the task.\n\
         \x20   - Task Description: A detailed explanation of the task and should contain the following parts:\n\
         \x20       - Explicitly specifying the expected output format and requirements (e.g., classification label, numerical score, structured JSON, Python list).\n\
         \x20       - If the task is a classification task or contains classification task as subtask, for closed-set classification, you should explicitly list all allowed labels. For open-set classification, you should instruct the model to infer the appropriate labels from the input.\n\
         \x20       - If the task is a annotation/extraction task, you should specify whether the extracted or annotated text must exactly match the original text or if modifications are allowed.\n\
         \x20       - If the task requires structured output, specify the exact structure (for example, a JSON schema or Python list format) and enumerate all required fields.\n\
         \x20   - Task Examples: You should provide at least EIGHT concrete examples, each including:\n\
         \x20       - Task Input: Formatted according to the input specifications.\n\
         \x20       - Task Output: Formatted according to the output specifications."
    )
}

pub const DEMO_GENERATION_HEAD: &str =
    "Generate two instances for the following task.";

/// Demo generation prompt with two reference texts. `minority_label`, when
/// set, constrains both instances to that output label (rebalancing).
pub fn render_demo_generation(
    reference_1: &str,
    reference_2: &str,
    task_description: &str,
    minority_label: Option<&str>,
) -> String {
    let mut out = format!(
        "{DEMO_GENERATION_HEAD} The text part in the samples needs to refer to the style, vocabulary, and themes in the Reference Texts. Carefully read the task description to ensure the correct labeling in the generated samples.\n\
         \n\
         Reference Texts:\n\
         {reference_1}\n\
         {reference_2}\n\
         \n\
         Task Description:\n\
         {task_description}\n"
    );
    if let Some(label) = minority_label {
        out.push_str(&format!(
            "\nAdditional Requirement:\nBoth instances must belong to the underrepresented category \"{label}\". The Output of each instance must be exactly: {label}\n"
        ));
    }
    out.push_str(
        "\nGive your response in the following format:\n\
         Input: {}\n\
         Output: {}",
    );
    out
}

/// Distillation prompt: instruction body, sampled demos as Input/Output
/// blocks, then the target text with an empty Output slot. Byte-stable.
pub fn render_distillation_prompt(
    instruction: &Instruction,
    demos: &[&Demonstration],
    text: &str,
) -> String {
    let mut out = String::new();
    out.push_str(instruction.body.trim_end());
    out.push_str("\n\n");
    for demo in demos {
        out.push_str(&format!(
            "Input: {}\nOutput: {}\n\n",
            demo.input, demo.output
        ));
    }
    out.push_str(&format!("Input: {text}\nOutput:"));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Task, TaskType};

    #[test]
    fn attribute_prompt_embeds_text() {
        let p = render_attribute_enumeration("Great phone, awful battery.");
        assert!(p.starts_with(ATTRIBUTE_ENUMERATION_HEAD));
        assert!(p.contains("Input: Great phone, awful battery.\n"));
        assert!(p.ends_with("Attribute:"));
    }

    #[test]
    fn open_task_prompt_caps_explanations_at_five() {
        let expl: Vec<(String, String)> = (0..7)
            .map(|i| (format!("attr{i}"), format!("explanation {i}")))
            .collect();
        let p = render_open_task_generation("tone", &expl);
        assert!(p.contains("attribute categories and without relying on specific attribute: tone."));
        assert!(p.contains("The explanation for attr4 is explanation 4."));
        assert!(!p.contains("attr5"));
    }

    #[test]
    fn constrained_task_prompt_names_perspective_twice() {
        let p = render_constrained_task_generation("tone", "overall emotional coloring");
        assert!(p.contains("**tone(overall emotional coloring)**"));
        assert!(p.contains("tasks focused on **tone**"));
    }

    #[test]
    fn demo_prompt_constraint_line_only_when_rebalancing() {
        let plain = render_demo_generation("r1", "r2", "classify tone", None);
        assert!(!plain.contains("Additional Requirement"));
        assert!(plain.ends_with("Input: {}\nOutput: {}"));
        let constrained = render_demo_generation("r1", "r2", "classify tone", Some("Neutral"));
        assert!(constrained.contains("must be exactly: Neutral"));
    }

    #[test]
    fn distillation_prompt_layout_is_stable() {
        let instruction = Instruction {
            id: "ins-1".into(),
            task: Task {
                perspective_id: 0,
                name: "tone classification".into(),
                description: "classify tone".into(),
                task_type: TaskType::Classification,
            },
            body: "Task Name: tone classification\nTask Description: pick a label.\nOutput Format: one label.".into(),
            demos: vec![],
            imbalanced: false,
        };
        let demo = Demonstration {
            input: "Loved it".into(),
            output: "Positive".into(),
            class_label: Some("Positive".into()),
        };
        let p = render_distillation_prompt(&instruction, &[&demo], "Meh.");
        assert_eq!(
            p,
            "Task Name: tone classification\nTask Description: pick a label.\nOutput Format: one label.\n\nInput: Loved it\nOutput: Positive\n\nInput: Meh.\nOutput:"
        );
    }
}
