import type { MetricComparison, StudyReport } from "./types";

function metricRow(label: string, m: MetricComparison): string {
  const significant = m.p_two_tailed < 0.01;
  const pText = m.p_two_tailed < 0.001 ? "p &lt; 0.001" : `p = ${m.p_two_tailed.toFixed(4)}`;
  return [
    `<tr class="${significant ? "significant" : ""}">`,
    `<td>${label}</td>`,
    `<td>${m.mean_A.toFixed(3)}</td>`,
    `<td>${m.mean_B.toFixed(3)}</td>`,
    `<td>t(${m.df}) = ${m.t.toFixed(2)}</td>`,
    `<td>${pText}${significant ? ' <strong class="sig-badge">significant</strong>' : ""}</td>`,
    `</tr>`,
  ].join("");
}

/** Study report table; variants appear only as the opaque labels A and B. */
export function renderStudyReport(report: StudyReport): string {
  return [
    `<table class="study-report">`,
    `<thead><tr><th>measure</th><th>System A</th><th>System B</th><th>paired t</th><th>two-tailed</th></tr></thead>`,
    `<tbody>`,
    metricRow("satisfaction (1-5)", report.satisfaction),
    metricRow("task duration (s)", report.duration_seconds),
    `</tbody>`,
    `</table>`,
    `<p class="report-meta">${report.participants} participants; ` +
      `${report.session_counts.A} sessions on A, ${report.session_counts.B} on B.</p>`,
  ].join("\n");
}

/** Friendly rendering for report fetch failures (incomplete or degenerate data). */
export function renderReportError(status: number, detail: string): string {
  if (status === 409) {
    return (
      `<div class="report-error guidance">The report needs every participant to ` +
      `complete at least one task on each system. ${escape(detail)}</div>`
    );
  }
  if (status === 422) {
    return (
      `<div class="report-error guidance">The paired test is undefined on this data: ` +
      `${escape(detail)}</div>`
    );
  }
  return `<div class="report-error">Could not load the report (HTTP ${status}): ${escape(detail)}</div>`;
}

function escape(value: string): string {
  return value.replace(/&/g, "&amp;").replace(/</g, "&lt;").replace(/>/g, "&gt;");
}
