//! Prompt text for operators, the designer and the summarizer.

use crate::graph::OperatorTemplate;

/// Designer instruction block. Versioned asset; `{templates}` and `{summary}`
/// are substituted at render time.
pub const DESIGNER_PROMPT_V1: &str = include_str!("../prompts/designer_v1.txt");

/// Summarizer instruction block; `{state}` is substituted at render time.
pub const SUMMARIZER_PROMPT_V1: &str = include_str!("../prompts/summarizer_v1.txt");

const GENERATE_CODE: &str = "You are an expert in solving coding problems. Generate Python code based on the following context and guidance.

Context: {context}
Guidance: {guidance}

Your code must:
1. Define a function named solve that calculates and returns the final result.
2. Clearly comment each computational step.
3. Obtain necessary inputs from within the function or global variables (no function parameters).

Output Format:
```python
# Your generated code here (use the main function name `solve`)
```";

const GENERATE_ANSWER: &str = "You are an expert in solving reasoning problems. Think step by step to solve the problem using the context and guidance.

Context: {context}
Guidance: {guidance}

Output Format:
Reasoning: <You should think step by step to solve the problem.>
Answer:";

const REVIEW_SOLUTION: &str = "You are a careful reviewer trained to detect logical and mathematical errors. Your job is to critically evaluate the solution for correctness, soundness, and completeness.

Context: {context}
Guidance: {guidance}

Instructions:
- Try to find mistakes at every step of the given answer.
- Bring the answer back to the original question and check if there is anything that does not meet the requirements.

Output Format:
Review Details: <step-by-step review>
Overall Verdict: <accept/minor_issues/major_issues/reject>";

const DECOMPOSE_PROBLEM: &str = "You are an expert in decomposing problems. Break down the original problem into clearly defined, structured sub-tasks.

Context: {context}
Guidance: {guidance}

Instructions:
- Clearly outline each distinct sub-task.
- Do not attempt to solve any sub-task.
- Maintain logical completeness.
- Decompose the problem into 2–4 steps at most.

Output:
<your_decomposed_problem>";

const GENERATE_PLAN: &str = "You are an expert in generating step-by-step executable plans. Generate a step-by-step executable plan to approach the given problem.

Context: {context}
Guidance: {guidance}

Instructions:
- Clearly number each step.
- Ensure each step is actionable and logically sequenced.
- Do not solve the problem here, only provide the plan.
- Give 2–4 steps at most.

Output Format:
Solution Plan:
<step_id>: <description>
<step_id>: <description>";

const REFINE_CODE: &str = "You are an expert in refining Python code. Refine the existing Python code based on context and guidance.

Context: {context}
Guidance: {guidance}

Instructions:
- Correct errors or inefficiencies identified.
- Clearly comment important logic or corrections.
- Maintain the main function name as solve.

Output Format:
```python
# Your refined code here (use the main function name `solve`)
```";

const REFINE_ANSWER: &str = "You are an expert in refining answers. Refine the existing answer based on context and guidance.

Context: {context}
Guidance: {guidance}

Output Format:
Answer: <your refined answer>";

const ORGANIZE_SOLUTION: &str = "You are an expert in organizing solutions. Clearly organize the final solution for presentation based on the provided context and guidance.

Context: {context}
Guidance: {guidance}

Instructions:
- Clearly present final reasoning steps and results.
- Ensure alignment with the problem's required formatting.
- Omit irrelevant or incorrect previous attempts.

Output:
<your_organized_solution>";

const ENSEMBLE: &str = "You are an expert in generating multiple valid and diverse solutions using distinct logical approaches.

Context: {context}
Guidance: {guidance}

Instructions:
- Each solution must independently satisfy all constraints.
- Clearly separate each distinct reasoning path and solution.

Output:
<your_ensemble_output>";

const DEFAULT: &str = "You are an expert in executing actions strictly according to the given context and guidance.

Context: {context}
Guidance: {guidance}

Instructions:
- Follow every detail of the instructions carefully.
- Ensure output exactly matches the requested format.

Output:
<your_output>";

/// Raw template text with `{context}` / `{guidance}` placeholders; empty for
/// TERMINATE.
pub fn operator_template_text(template: OperatorTemplate) -> &'static str {
    match template {
        OperatorTemplate::GenerateCode => GENERATE_CODE,
        OperatorTemplate::GenerateAnswer => GENERATE_ANSWER,
        OperatorTemplate::ReviewSolution => REVIEW_SOLUTION,
        OperatorTemplate::DecomposeProblem => DECOMPOSE_PROBLEM,
        OperatorTemplate::GeneratePlan => GENERATE_PLAN,
        OperatorTemplate::RefineCode => REFINE_CODE,
        OperatorTemplate::RefineAnswer => REFINE_ANSWER,
        OperatorTemplate::OrganizeSolution => ORGANIZE_SOLUTION,
        OperatorTemplate::Ensemble => ENSEMBLE,
        OperatorTemplate::Default => DEFAULT,
        OperatorTemplate::Terminate => "",
    }
}

/// Fills one operator template. Substitution is single-pass, so braces inside
/// `context` or `guidance` are never re-expanded.
pub fn render_operator_prompt(template: OperatorTemplate, context: &str, guidance: &str) -> String {
    fill(operator_template_text(template), &[("{context}", context), ("{guidance}", guidance)])
}

/// The `- NAME: description` listing shown to the designer.
pub fn template_catalog() -> String {
    OperatorTemplate::ALL
        .iter()
        .map(|t| format!("- {}: {}", t.name(), t.description()))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn render_designer_prompt(summary: &str) -> String {
    fill(DESIGNER_PROMPT_V1, &[("{templates}", &template_catalog()), ("{summary}", summary)])
}

pub fn render_summarizer_prompt(state_digest: &str) -> String {
    fill(SUMMARIZER_PROMPT_V1, &[("{state}", state_digest)])
}

/// Replaces each placeholder once per occurrence, scanning left to right over
/// the template only.
fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + vars.iter().map(|(_, v)| v.len()).sum::<usize>());
    let mut rest = template;
    'outer: while !rest.is_empty() {
        for (name, value) in vars {
            if let Some(tail) = rest.strip_prefix(name) {
                out.push_str(value);
                rest = tail;
                continue 'outer;
            }
        }
        let mut chars = rest.chars();
        out.push(chars.next().expect("nonempty"));
        rest = chars.as_str();
    }
    out
}
