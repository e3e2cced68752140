"""GeoJSON and static HTML exports of verified trends."""

from __future__ import annotations

import html
import json
from pathlib import Path
from typing import Mapping, Sequence

from .change_detection import ChangeRecord
from .corpus import format_time
from .trends import TrendProposal, VerificationResult


def trends_geojson(
    pairs: Sequence[tuple[TrendProposal, VerificationResult]],
    changes_by_id: Mapping[str, ChangeRecord],
) -> dict:
    """RFC 7946 FeatureCollection with one Point per confirmed change of each positive trend."""
    features = []
    for proposal, result in sorted(pairs, key=lambda pr: pr[0].proposal_id):
        if not result.positive:
            continue
        for cid in result.confirmed_change_ids:
            c = changes_by_id.get(cid)
            if c is None:
                continue
            features.append(
                {
                    "type": "Feature",
                    "geometry": {"type": "Point", "coordinates": [c.lon, c.lat]},
                    "properties": {
                        "trend_id": proposal.proposal_id,
                        "trend": proposal.text,
                        "change_id": c.id,
                        "location_id": c.location_id,
                        "before": c.before_desc,
                        "after": c.after_desc,
                        "before_time": format_time(c.before_time),
                        "after_time": format_time(c.after_time),
                        "before_image": c.before_image,
                        "after_image": c.after_image,
                    },
                }
            )
    return {"type": "FeatureCollection", "features": features}


def write_geojson(path: str | Path, collection: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(collection, indent=1, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def render_report(
    pairs: Sequence[tuple[TrendProposal, VerificationResult]],
    changes_by_id: Mapping[str, ChangeRecord],
    title: str = "Verified trends",
    evidence_per_trend: int = 10,
) -> str:
    esc = html.escape
    positive = [(p, r) for p, r in pairs if r.positive]
    positive.sort(key=lambda pr: (-len(pr[1].confirmed_change_ids), pr[0].proposal_id))
    out = [
        "<!DOCTYPE html>",
        '<html lang="en"><head><meta charset="utf-8">',
        f"<title>{esc(title)}</title></head><body>",
        f"<h1>{esc(title)}</h1>",
        f"<p>{len(positive)} of {len(pairs)} proposals verified.</p>",
        "<p>Counts reflect where and when images were captured; they are not corrected for spatial or temporal sampling bias.</p>",
    ]
    for p, r in positive:
        out.append(f'<section id="{esc(p.proposal_id)}">')
        out.append(f"<h2>{esc(p.text)}</h2>")
        out.append(
            f"<p>{len(r.confirmed_change_ids)} confirmed changes; "
            f"{r.oracle_queries_used} analyst queries; {p.member_count} cluster members.</p>"
        )
        out.append("<ul>")
        for cid in r.confirmed_change_ids[:evidence_per_trend]:
            c = changes_by_id.get(cid)
            if c is None:
                continue
            out.append(
                f"<li>{esc(c.location_id)} ({c.lat:.6f}, {c.lon:.6f}) "
                f"{esc(format_time(c.before_time))} &rarr; {esc(format_time(c.after_time))}: "
                f"{esc(c.text)} [{esc(c.before_image)} | {esc(c.after_image)}]</li>"
            )
        out.append("</ul></section>")
    out.append("</body></html>")
    return "\n".join(out) + "\n"
