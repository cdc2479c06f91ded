"""Self-contained demo corpus: five toy instances with seeded bugs, oracle
commands, scripted backend playbooks for every pipeline stage, an external
prediction file, and a ready-to-run config.

Four instances are happy paths where every machine pair lands the correct
edit. The fifth is adversarial: ten distinct candidates each pass only their
own test, so plain majority voting falls through to the shortest-diff tie
break and deploys a wrong edit, while the selection machine can still write
a discriminating test and pick the one correct candidate.
"""

from __future__ import annotations

import difflib
import json
from dataclasses import dataclass
from pathlib import Path

from patchpool.llm import MockEntry
from patchpool.llm.backend import write_playbook

MACHINES_PER_INSTANCE = 10
ADV_CORRECT_MACHINE = 9

# Wrong replacement payloads for the adversarial instance, indexed by machine.
# Lengths are engineered: two shorter than the correct payload ("correct", 7
# chars) and the rest longer, so the all-tied vote ranks exactly two wrong
# candidates ahead of the correct one on diff length.
ADV_TOKENS = {
    0: "ox",
    1: "bee",
    **{m: f"wrong_branch_{m}_padding" for m in range(2, 9)},
    ADV_CORRECT_MACHINE: "correct",
}


@dataclass(frozen=True)
class HappyFixture:
    instance_id: str
    module: str
    helper: str
    helper_relevant: bool
    module_body: str
    helper_body: str
    buggy_line: str
    fixed_line: str
    check_bug: str
    check_fixed: str
    issue_text: str


HAPPY_FIXTURES = (
    HappyFixture(
        instance_id="demo-0001",
        module="app.py",
        helper="util.py",
        helper_relevant=True,
        module_body=(
            '"""Greeting service used by the demo CLI."""\n'
            "\n"
            "from util import normalize\n"
            "\n"
            "\n"
            "def greet():\n"
            '    return "hello"\n'
            "\n"
            "\n"
            "def greet_person(name):\n"
            '    return greet() + ", " + normalize(name)\n'
        ),
        helper_body=(
            '"""Small helpers shared by the demo modules."""\n'
            "\n"
            "\n"
            "def normalize(text):\n"
            "    return text.strip().lower()\n"
        ),
        buggy_line='    return "hello"',
        fixed_line='    return "hello, world"',
        check_bug='return "hello"',
        check_fixed='return "hello, world"',
        issue_text=(
            "greet() returns 'hello' but every caller expects the full "
            "greeting 'hello, world'. The shortened string breaks the CLI "
            "banner test downstream."
        ),
    ),
    HappyFixture(
        instance_id="demo-0002",
        module="retry.py",
        helper="config_loader.py",
        helper_relevant=False,
        module_body=(
            '"""Retry policy for outbound calls."""\n'
            "\n"
            "ATTEMPTS = 1\n"
            "\n"
            "\n"
            "def backoff(attempt):\n"
            "    return min(2 ** attempt, 30)\n"
        ),
        helper_body=(
            '"""Loads deployment settings from the environment."""\n'
            "\n"
            "import os\n"
            "\n"
            "\n"
            "def load(name, default):\n"
            "    return os.environ.get(name, default)\n"
        ),
        buggy_line="ATTEMPTS = 1",
        fixed_line="ATTEMPTS = 3",
        check_bug="ATTEMPTS = 1",
        check_fixed="ATTEMPTS = 3",
        issue_text=(
            "Transient network errors are not retried: ATTEMPTS is 1 so a "
            "single failure aborts the call. The agreed policy is three "
            "attempts with the existing backoff."
        ),
    ),
    HappyFixture(
        instance_id="demo-0003",
        module="flags.py",
        helper="paths.py",
        helper_relevant=True,
        module_body=(
            '"""Feature flags for the demo web service."""\n'
            "\n"
            "DEBUG = True\n"
            "VERBOSE_ERRORS = False\n"
        ),
        helper_body=(
            '"""Filesystem layout of the service."""\n'
            "\n"
            "LOG_DIR = \"/var/log/demo\"\n"
            "DATA_DIR = \"/var/lib/demo\"\n"
        ),
        buggy_line="DEBUG = True",
        fixed_line="DEBUG = False",
        check_bug="DEBUG = True",
        check_fixed="DEBUG = False",
        issue_text=(
            "Production deploys ship with DEBUG enabled, which leaks stack "
            "traces to clients. DEBUG must default to off."
        ),
    ),
    HappyFixture(
        instance_id="demo-0004",
        module="scale.py",
        helper="shapes.py",
        helper_relevant=False,
        module_body=(
            '"""Unit scaling for the rendering pipeline."""\n'
            "\n"
            "FACTOR = 0.5\n"
            "\n"
            "\n"
            "def scale(value):\n"
            "    return value * FACTOR\n"
        ),
        helper_body=(
            '"""Primitive shape definitions."""\n'
            "\n"
            "\n"
            "def rectangle(w, h):\n"
            "    return {\"w\": w, \"h\": h}\n"
        ),
        buggy_line="FACTOR = 0.5",
        fixed_line="FACTOR = 2.0",
        check_bug="FACTOR = 0.5",
        check_fixed="FACTOR = 2.0",
        issue_text=(
            "Rendered output is half the expected size. The scale factor "
            "regressed from 2.0 to 0.5 in the last refactor and needs to "
            "go back."
        ),
    ),
)

ADV_ID = "demo-0005"
ADV_MODULE = "lib.py"
ADV_HELPER = "util.py"
ADV_MODULE_BODY = (
    '"""Answer store consulted by the demo pipeline."""\n'
    "\n"
    "\n"
    "def answer():\n"
    '    return "broken"\n'
    "\n"
    "\n"
    "def answer_loudly():\n"
    "    return answer().upper()\n"
)
ADV_HELPER_BODY = (
    '"""Formatting helpers for answers."""\n'
    "\n"
    "\n"
    "def frame(text):\n"
    '    return "[" + text + "]"\n'
)
ADV_ISSUE = (
    "answer() returns the placeholder 'broken' instead of the real value "
    "'correct'. Everything downstream of answer_loudly() shows the "
    "placeholder."
)


def _test_reply(script: str, note: str) -> str:
    return f"{note}\n\n```test\n{script}```\n"


def _approve_reply(note: str) -> str:
    return f"{note}\n\n```approve\n```\n"


def _edit_reply(path: str, search: str, replace: str, note: str) -> str:
    return (
        f"{note}\n\n```edit\n<<<BEGIN {path}\n<<<SEARCH\n{search}\n"
        f"<<<REPLACE\n{replace}\n<<<END\n```\n"
    )


def _select_reply(index: int, note: str) -> str:
    return f"{note}\n\n```select:{index}\n```\n"


def _check_script(module: str, check_fixed: str, check_bug: str) -> str:
    return (
        f"grep -qF '{check_fixed}' {module} && exit 0\n"
        f"grep -qF '{check_bug}' {module} && exit 2\n"
        "exit 1\n"
    )


def _oracle_script(module: str, check_fixed: str) -> list[str]:
    return ["sh", "-c", f"grep -qF '{check_fixed}' {module}"]


def _relevance_entries(files: dict[str, str | None]) -> list[MockEntry]:
    """One hinted entry per scanned file; value None means irrelevant."""
    entries = []
    for path in sorted(files):
        summary = files[path]
        response = (
            f"RELEVANT\nSUMMARY: {summary}" if summary is not None else "IRRELEVANT"
        )
        entries.append(MockEntry(response=response, match_hint=f'<file path="{path}"'))
    return entries


def _unified_diff(path: str, old: str, new: str) -> str:
    lines = difflib.unified_diff(
        old.splitlines(keepends=True),
        new.splitlines(keepends=True),
        fromfile=f"a/{path}",
        tofile=f"b/{path}",
    )
    return "".join(lines)


def _write_happy(out: Path, fix: HappyFixture) -> dict[str, str]:
    iid = fix.instance_id
    src = out / "dataset" / f"{iid}-src"
    src.mkdir(parents=True, exist_ok=True)
    (src / fix.module).write_text(fix.module_body, encoding="utf-8")
    (src / fix.helper).write_text(fix.helper_body, encoding="utf-8")
    (src / "README.md").write_text(f"Demo repository for {iid}.\n", encoding="utf-8")

    descriptor = {
        "instance_id": iid,
        "issue_text": fix.issue_text,
        "snapshot": f"{iid}-src",
        "gold_edit_files": [fix.module],
        "oracle_eval": _oracle_script(fix.module, fix.check_fixed),
        "source_file_filter": {"extensions": [".py"], "exclude_dirs": ["tests"]},
    }
    (out / "dataset" / f"{iid}.json").write_text(
        json.dumps(descriptor, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )

    books = out / "playbooks" / iid
    module_summary = "Holds the constant and function the issue says is wrong."
    helper_summary = "Helpers imported by the buggy module."
    _write_relevance_and_ranking(
        books,
        module=fix.module,
        helper=fix.helper,
        helper_summary=helper_summary if fix.helper_relevant else None,
        module_summary=module_summary,
    )

    check = _check_script(fix.module, fix.check_fixed, fix.check_bug)
    for m in range(MACHINES_PER_INSTANCE):
        testing: list[MockEntry] = []
        if iid == "demo-0001" and m == 0:
            # One scripted malformed reply exercises the correction prompt
            # inside a full pipeline run.
            testing.append(
                MockEntry(response="I will write a focused reproduction test first.")
            )
        if m == 1:
            testing.append(
                MockEntry(response=_test_reply("exit 2\n", "Start with a coarse check."))
            )
        testing.append(
            MockEntry(response=_test_reply(check, "This reproduces the issue."))
        )
        testing.append(
            MockEntry(
                response=_approve_reply("The test exits 2 on the unedited code."),
            )
        )
        write_playbook(books / "testing" / f"{m:02d}.json", testing)

        editing = [
            MockEntry(
                response=_edit_reply(
                    fix.module,
                    fix.buggy_line,
                    fix.fixed_line,
                    "Swap the wrong value for the expected one.",
                )
            ),
            MockEntry(response=_approve_reply("Fails before, passes after.")),
        ]
        write_playbook(books / "editing" / f"{m:02d}.json", editing)

    confirm = f"grep -qF '{fix.check_fixed}' {fix.module} && exit 0\nexit 2\n"
    write_playbook(
        books / "selection.json",
        [
            MockEntry(response=_test_reply(confirm, "Check the expected value directly.")),
            MockEntry(response=_select_reply(0, "Candidate 0 passes the check.")),
        ],
    )
    write_playbook(
        books / "single_select.json",
        [MockEntry(response="All candidates look identical, so:\n\nselect 0")],
    )
    write_playbook(
        books / "ensemble.json",
        [
            MockEntry(response=_test_reply(confirm, "Verify the expected value.")),
            MockEntry(response=_select_reply(0, "The first candidate is correct.")),
        ],
    )
    wrong_external = fix.module_body.replace(
        fix.buggy_line, fix.buggy_line + "  # needs verification", 1
    )
    return {
        "instance_id": iid,
        "patch": _unified_diff(fix.module, fix.module_body, wrong_external),
        "source_name": "rival",
    }


def _write_relevance_and_ranking(
    books: Path,
    module: str,
    helper: str,
    module_summary: str,
    helper_summary: str | None,
) -> None:
    write_playbook(
        books / "relevance.json",
        _relevance_entries({module: module_summary, helper: helper_summary}),
    )
    if helper_summary is None:
        # A single relevant file short-circuits ranking; the repetition
        # playbooks must still exist for the sessions to open.
        for rep in range(3):
            write_playbook(books / "ranking" / f"rep{rep}.json", [])
        return
    for rep, order in enumerate(
        (f"{module}\n{helper}", f"{module}\n{helper}", f"{helper}\n{module}")
    ):
        write_playbook(books / "ranking" / f"rep{rep}.json", [MockEntry(response=order)])


def _write_adversarial(out: Path) -> dict[str, str]:
    iid = ADV_ID
    src = out / "dataset" / f"{iid}-src"
    src.mkdir(parents=True, exist_ok=True)
    (src / ADV_MODULE).write_text(ADV_MODULE_BODY, encoding="utf-8")
    (src / ADV_HELPER).write_text(ADV_HELPER_BODY, encoding="utf-8")
    (src / "README.md").write_text(f"Demo repository for {iid}.\n", encoding="utf-8")

    descriptor = {
        "instance_id": iid,
        "issue_text": ADV_ISSUE,
        "snapshot": f"{iid}-src",
        "gold_edit_files": [ADV_MODULE],
        "oracle_eval": _oracle_script(ADV_MODULE, 'return "correct"'),
        "source_file_filter": {"extensions": [".py"], "exclude_dirs": ["tests"]},
    }
    (out / "dataset" / f"{iid}.json").write_text(
        json.dumps(descriptor, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )

    books = out / "playbooks" / iid
    _write_relevance_and_ranking(
        books,
        module=ADV_MODULE,
        helper=ADV_HELPER,
        module_summary="Contains answer(), which returns the placeholder.",
        helper_summary="Formats answers for display.",
    )

    for m in range(MACHINES_PER_INSTANCE):
        token = ADV_TOKENS[m]
        check = (
            f"grep -qF 'return \"{token}\"' {ADV_MODULE} && exit 0\n"
            f"grep -qF 'return \"broken\"' {ADV_MODULE} && exit 2\n"
            "exit 1\n"
        )
        write_playbook(
            books / "testing" / f"{m:02d}.json",
            [
                MockEntry(response=_test_reply(check, "Assert the replacement value.")),
                MockEntry(response=_approve_reply("Exits 2 while the placeholder is in place.")),
            ],
        )
        write_playbook(
            books / "editing" / f"{m:02d}.json",
            [
                MockEntry(
                    response=_edit_reply(
                        ADV_MODULE,
                        '    return "broken"',
                        f'    return "{token}"',
                        "Replace the placeholder.",
                    )
                ),
                MockEntry(response=_approve_reply("Two-sided check is green.")),
            ],
        )

    confirm = f"grep -qF 'return \"correct\"' {ADV_MODULE} && exit 0\nexit 2\n"
    write_playbook(
        books / "selection.json",
        [
            MockEntry(
                response=_test_reply(
                    confirm, "Only the genuinely correct value should pass."
                )
            ),
            MockEntry(response=_select_reply(2, "Candidate 2 alone passes.")),
        ],
    )
    write_playbook(
        books / "single_select.json",
        [MockEntry(response="The shortest edit looks cleanest.\n\nselect 0")],
    )
    write_playbook(
        books / "ensemble.json",
        [
            MockEntry(response=_test_reply(confirm, "Verify the real value.")),
            MockEntry(response=_select_reply(0, "The native candidate passes.")),
        ],
    )
    wrong_external = ADV_MODULE_BODY.replace('return "broken"', 'return "BROKEN"')
    return {
        "instance_id": iid,
        "patch": _unified_diff(ADV_MODULE, ADV_MODULE_BODY, wrong_external),
        "source_name": "rival",
    }


def write_fixture_corpus(out: Path) -> Path:
    """Write dataset, playbooks, external predictions, and config under out.

    Returns the path of the run config file.
    """
    out = Path(out)
    (out / "dataset").mkdir(parents=True, exist_ok=True)
    externals = [_write_happy(out, fix) for fix in HAPPY_FIXTURES]
    externals.append(_write_adversarial(out))
    (out / "external.json").write_text(
        json.dumps(externals, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )

    config = {
        "run_id": "fixture-run",
        "dataset_dir": "dataset",
        "store_root": "runs",
        "workers": 4,
        "machines_per_instance": MACHINES_PER_INSTANCE,
        "generation": {"max_completions": 8, "temperature": 0.5},
        "selection": {"max_completions": 10, "temperature": 0.0, "top_k": 3},
        "context": {
            "cap_tokens": 128000,
            "ranking_target_tokens": 60000,
            "repetitions": 3,
            "scan_chunk_tokens": 32000,
        },
        "sandbox": {"interpreter_cmd": ["sh", "{script}"], "timeout_s": 10.0},
        "backend": {"kind": "mock", "playbook_dir": "playbooks"},
        "retry": {"max_attempts": 3, "base_delay": 0.0, "factor": 2.0},
    }
    config_path = out / "config.json"
    config_path.write_text(
        json.dumps(config, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return config_path
