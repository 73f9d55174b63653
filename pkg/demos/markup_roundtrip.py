"""Instruction dialogues and `<Xray>` markup, end to end.

Synthesizes the three dialogue archetypes for one record, validates their
markup, and shows the assistant-side extraction recovering the embedded
view-augmented report exactly.
"""

from cxrkit.assistant import extract_xray_prompts
from cxrkit.corpus import CorpusConfig, sample_record, write_report
from cxrkit.instruct import TemplateInstructor, prepend_view, synthesize_dialogues


def main():
    findings, view = sample_record(1234, CorpusConfig())
    record = write_report(findings, view, seed=1234)
    print(f"source report [{view}]: {record.text}\n")

    for d in synthesize_dialogues(record, TemplateInstructor()):
        print(f"--- {d.archetype} dialogue ---")
        for speaker, text in d.turns:
            print(f"{speaker}: {text}")
        problems = d.validate()
        print(f"markup valid: {not problems}")
        if d.archetype == "generate":
            prompts, cleaned, diags = extract_xray_prompts(d.turns[-1][1])
            embedded = prepend_view(record.text, view)
            print(f"extracted prompt == embedded report: "
                  f"{prompts == [embedded]}")
            print(f"user-visible text: {cleaned}")
        print()


if __name__ == "__main__":
    main()
