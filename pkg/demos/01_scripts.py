"""Structured scripts: parse, canonicalise, diagnose, and split.

A script is line-oriented text.  Headers such as <Character1> or <Frame2>
open a section; entity tokens inside descriptions are references, and
<-...-> marks spoken lines (or sound effects with an "SFX: " prefix).
"""

from scriptmot.data import extractive_summary, split_for_continuation, split_for_extension
from scriptmot.script import ScriptError, extract_dialogue, parse_script, serialize_script

TEXT = """<User> style=2
a lonely knight crosses the frozen sea
<Character1>
a tall knight in silver armor
short: tall silver knight
<Environment1>
a frozen sea under a pale sky
<Frame1>
wide shot, <Character1> stands on <Environment1>
<Video1>
<Character1> whispers <-Now close your eyes.-> as <-SFX: wind howls->
<Frame2>
close up of <Character1>
in <Environment1>
<Video2>
<Character1> walks on.
"""

script = parse_script(TEXT)
print(f"{len(script.characters)} character(s), {len(script.environments)} environment(s), {len(script.shots)} shots")

# Multi-line bodies are joined with single spaces, so the canonical text
# differs from the input but is a fixed point of parse -> serialize.
canon = serialize_script(script)
assert serialize_script(parse_script(canon)) == canon
print(canon)

for shot, span in extract_dialogue(script):
    print(f"shot {shot}: {span.category.value}: {span.content}")

# Errors carry path:line:col positions.
broken = TEXT.replace("close up of <Character1>", "close up of <Character2>")
try:
    parse_script(broken)
except ScriptError as exc:
    for d in exc.diagnostics:
        print(d.format("broken.script"))

# Training-time splitting: an extension point after shot 1 with a summary
# prompt, and a continuation before the last shot.
print(serialize_script(split_for_extension(script, 1, extractive_summary(script.shots[1:]))))
print(serialize_script(split_for_continuation(script)))
