#pragma once

// Wire-format prompt templates for the annotation, cluster summarization,
// student simulation and judge roles. Text is kept verbatim; only the slot
// values vary.

#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "kaser/common.hpp"

namespace kaser::prompts {

inline std::string replace_all(std::string s, std::string_view from, std::string_view to) {
    for (std::size_t pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size()))
        s.replace(pos, from.size(), to);
    return s;
}

// Error labeling with in-context category examples.
inline constexpr std::string_view annotate_system_template =
    "You are an expert {language} programming instructor and automated code reviewer.\n"
    "Given a {language} programming problem and a student's buggy code solution, your task is to identify all "
    "errors present in the code. There is at least one error in the code. Use concise and standardized "
    "label/taxonomy for each error. Make sure the error label is generalizable without problem specific "
    "description.\n"
    "Take the following error label examples as reference:\n"
    "Syntax Error (Examples): Confusing assignment with equality, Unbalanced parentheses, Semicolon errors\n"
    "Runtime Error (Examples): Uninitialized Variables, Parameter confusion, NullPointerExceptions\n"
    "Logical Error (Examples): Off-by-one errors, Integer Division, Infinite Loops\n"
    "\n"
    "Return a JSON object with this template:\n"
    "{\n"
    "\"errors\": [\n"
    "    {\n"
    "    \"Reasoning\": \"<one sentence explanation of the error in the code>\",\n"
    "    \"Category\": \"Syntax | Runtime | Logical\",\n"
    "    \"Label\": \"<error label>\"\n"
    "    }\n"
    "    ]\n"
    "    }";

inline constexpr std::string_view annotate_system_prefix = "You are an expert ";

inline std::string annotate_system(Language lang) {
    return replace_all(std::string(annotate_system_template), "{language}", display_name(lang));
}

inline std::string annotate_user(std::string_view statement, std::string_view code) {
    return "Problem: " + std::string(statement) + "\n\nCode:\n" + std::string(code);
}

// Cluster summarization.
inline constexpr std::string_view summarize_system =
    "You are an experienced computer science teacher.\n"
    "You will be provided with a list of errors from student code that refer to the same underlying errors but "
    "may vary in wording.\n"
    "\n"
    "Your task is to:\n"
    "1. Carefully examine all the errors in the list to ensure none are overlooked.\n"
    "2. Reason explicitly the error refer to the same underlying concept or if they are related but represent "
    "distinct or complementary aspects of a broader theme.\n"
    "3. Based on your reasoning: select one error from the list that best represents the group — choose the "
    "one that is most clearly worded, generalizable, and inclusive of the others. Remove all problem specific "
    "description from the selected error.\n"
    "\n"
    "Return output strictly in the following JSON format:\n"
    "{\n"
    "\"Reasoning\": \"<Exactly one sentence explaining your reasoning on the majority error>\",\n"
    "\"Representative_error\": \"<Error name>\"\n"
    "}";

/// JSON list with ", " separators and ASCII escapes, as Python's json.dumps writes it.
inline std::string py_json_list(const std::vector<std::string>& items) {
    std::string out = "[";
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (i) out += ", ";
        out += nlohmann::json(items[i]).dump(-1, ' ', true);
    }
    return out + "]";
}

inline std::string summarize_user(const std::vector<std::string>& errors) {
    return "The error list is: " + py_json_list(errors) +
           "\n\nNow follow the instructions in system message and perform the task.";
}

// Knowledge-guided student simulation.
inline constexpr std::string_view simulate_system_template =
    "You are a student code simulator.\n"
    "Given a programming problem and the student's mastery levels for specific knowledge components (KCs), "
    "generate {language} code that reflects the understanding, including plausible student errors. Output only "
    "the code, with no explanations or comments.";

inline std::string simulate_system(Language lang) {
    return replace_all(std::string(simulate_system_template), "{language}", display_name(lang));
}

// Judge: which errors from a closed list occur in the code.
inline constexpr std::string_view judge_system =
    "You are an experienced code reviewer.\n"
    "Given a programming problem along with a code and a list of errors, your task is to:\n"
    "1. Examine the code and all the errors in the list.\n"
    "2. Reason which errors from the list are included in the code and return all that apply based on your "
    "reasoning.\n"
    "3. Return an empty list if none of the errors are present in the code or the code is correct.\n"
    "\n"
    "The output MUST match this exact schema:\n"
    "{\"errors\": [\"error 1\", \"error 2\", ...]}";

inline std::string judge_user(std::string_view statement, std::string_view code,
                              const std::vector<std::string>& error_list) {
    return "Problem: " + std::string(statement) + "\n\nCode: " + std::string(code) +
           "\n\nError list: " + py_json_list(error_list);
}

}  // namespace kaser::prompts
