import type { QueryHit } from "./types";

function escapeHtml(value: string): string {
  return value
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

export interface GridOptions {
  /** thumbnail URL builder; defaults to the service image route */
  imageUrl?: (recordId: string) => string;
  cutoffDate?: string;
}

function frameClass(hit: QueryHit): string {
  if (hit.class_match === null) return "hit-unscored";
  return hit.class_match ? "hit-match" : "hit-mismatch";
}

export function renderHitCard(hit: QueryHit, imageUrl: (id: string) => string): string {
  const cls = frameClass(hit);
  return [
    `<figure class="hit ${cls}" data-record-id="${escapeHtml(hit.record_id)}">`,
    `<img loading="lazy" src="${escapeHtml(imageUrl(hit.record_id))}" alt="${escapeHtml(hit.record_id)}" />`,
    `<figcaption>`,
    `<span class="hit-id">${escapeHtml(hit.record_id)}</span>`,
    `<span class="hit-class">${escapeHtml(hit.class_id)}</span>`,
    `<span class="hit-score">${hit.score.toFixed(4)}</span>`,
    `</figcaption>`,
    `</figure>`,
  ].join("");
}

/**
 * Ranked result grid. Hits matching the query's class get the match
 * frame, mismatches the mismatch frame, raw-vector hits the neutral one.
 * The grid is fixed at five columns; an empty result renders an explicit
 * no-prior-art notice instead of a silent blank.
 */
export function renderResultsGrid(hits: QueryHit[], options: GridOptions = {}): string {
  const imageUrl = options.imageUrl ?? ((id: string) => `/images/${encodeURIComponent(id)}`);
  if (hits.length === 0) {
    const date = options.cutoffDate ? ` before ${escapeHtml(options.cutoffDate)}` : "";
    return `<div class="empty-state">No prior art${date}.</div>`;
  }
  const cards = hits.map((hit) => renderHitCard(hit, imageUrl)).join("");
  return `<div class="results-grid" style="grid-template-columns: repeat(5, 1fr)">${cards}</div>`;
}
