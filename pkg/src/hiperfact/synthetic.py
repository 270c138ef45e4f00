"""Deterministic university-domain dataset generator.

Output is a fact file (see :mod:`hiperfact.textio`): one university per
scale unit with departments, professors, students, and courses wired
together through memberOf / teaches / takesCourse / subOrganizationOf
attributes.  A single seeded random stream drives every choice, so one
(scale, seed) pair always produces byte-identical output of roughly
1000 facts per university.
"""

from __future__ import annotations

import random
from typing import Iterator

_SUBJECTS = (
    "algebra", "compilers", "databases", "ethics", "genetics",
    "logic", "optics", "rhetoric", "statistics", "thermodynamics",
)
_DEPARTMENTS = (
    "Science", "Engineering", "Humanities", "Medicine", "Law", "Arts",
)


def _fact(fact_type, ident, attr, value, value_type) -> str:
    return f"{fact_type}\t{ident}\t{attr}\t{value}\t{value_type}"


def iter_university(u: int, rng: random.Random) -> Iterator[str]:
    uni = f"University{u}"
    yield _fact("University", uni, "rank", rng.randint(1, 500), "uint32")
    yield _fact("University", uni, "endowment",
                round(rng.uniform(1.0, 900.0), 2), "double")

    departments = []
    for name in rng.sample(_DEPARTMENTS, rng.randint(3, 5)):
        dep = f"{uni}.{name}"
        departments.append(dep)
        yield _fact("Department", dep, "subOrganizationOf", uni, "string")
        yield _fact("Department", dep, "budget",
                    round(rng.uniform(0.5, 40.0), 3), "double")

    courses = []
    for dep in departments:
        for subject in rng.sample(_SUBJECTS, rng.randint(6, 8)):
            course = f"{dep}.{subject}"
            courses.append(course)
            yield _fact("Course", course, "offeredBy", dep, "string")
            yield _fact("Course", course, "credits", rng.randint(2, 10), "uint32")

    for dep in departments:
        for p in range(rng.randint(4, 6)):
            prof = f"{dep}.prof{p}"
            yield _fact("Professor", prof, "memberOf", dep, "string")
            yield _fact("Professor", prof, "salary",
                        round(rng.uniform(40.0, 160.0), 2), "double")
            yield _fact("Professor", prof, "tenured",
                        "true" if rng.random() < 0.4 else "false", "bool")
            for course in rng.sample(courses, min(2, len(courses))):
                yield _fact("Professor", prof, "teaches", course, "string")

    for dep in departments:
        for s in range(rng.randint(30, 40)):
            student = f"{dep}.student{s}"
            yield _fact("Student", student, "memberOf", dep, "string")
            yield _fact("Student", student, "age", rng.randint(17, 45), "uint32")
            yield _fact("Student", student, "gpa",
                        round(rng.uniform(1.0, 4.0), 2), "double")
            for course in rng.sample(courses, min(3, len(courses))):
                yield _fact("Student", student, "takesCourse", course, "string")


def iter_synthetic(scale: int, seed: int) -> Iterator[str]:
    if scale < 0:
        raise ValueError("scale must be non-negative")
    rng = random.Random(seed)
    for u in range(scale):
        yield from iter_university(u, rng)


def generate_synthetic(scale: int, seed: int, out_path) -> int:
    """Write the dataset to ``out_path``; returns the fact count."""
    count = 0
    with open(out_path, "w", encoding="utf-8") as fh:
        for line in iter_synthetic(scale, seed):
            fh.write(line)
            fh.write("\n")
            count += 1
    return count
