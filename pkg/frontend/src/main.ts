import { ApiClient, ApiError } from "./api";
import { renderReportError, renderStudyReport } from "./reportView";
import { renderResultsGrid } from "./resultsGrid";
import { StudySessionController } from "./studySession";

const api = new ApiClient(
  (window as unknown as { PATRET_BASE_URL?: string }).PATRET_BASE_URL ?? "",
);

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function toast(message: string, retry?: () => void): void {
  const box = el<HTMLDivElement>("toast");
  box.innerHTML = "";
  box.textContent = message;
  if (retry) {
    const button = document.createElement("button");
    button.textContent = "retry";
    button.addEventListener("click", () => {
      box.classList.remove("visible");
      retry();
    });
    box.appendChild(button);
  }
  box.classList.add("visible");
  setTimeout(() => box.classList.remove("visible"), 6000);
}

/* ------------------------------ search tab ------------------------------ */

async function runSearch(): Promise<void> {
  const recordId = el<HTMLInputElement>("search-record").value.trim();
  const k = parseInt(el<HTMLInputElement>("search-k").value, 10) || 10;
  const cutoff = el<HTMLInputElement>("search-cutoff").value.trim();
  const variant = el<HTMLSelectElement>("search-variant").value;
  const container = el<HTMLDivElement>("search-results");
  const scroll = container.scrollTop;
  try {
    const response = await api.searchByRecord(recordId, {
      k,
      cutoffDate: cutoff || undefined,
      variant: variant || undefined,
    });
    container.innerHTML = renderResultsGrid(response.hits, {
      imageUrl: (id) => api.imageUrl(id),
      cutoffDate: response.cutoff_date,
    });
    container.scrollTop = scroll; // k changes keep the scroll position
  } catch (err) {
    const detail = err instanceof ApiError ? err.detail : String(err);
    toast(`Search failed: ${detail}`, runSearch);
  }
}

/* ------------------------------- study tab ------------------------------ */

let controller: StudySessionController | null = null;

function renderStudyState(): void {
  const status = el<HTMLDivElement>("study-status");
  if (!controller || controller.tasks.length === 0) {
    status.textContent = "Enter your participant id and start the session.";
    return;
  }
  if (controller.finished) {
    status.textContent = `All ${controller.tasks.length} tasks submitted. Thank you!`;
    return;
  }
  status.textContent =
    `Task ${controller.progressLabel} - record ${controller.currentTask.record_id}` +
    (controller.queuedCount ? ` (${controller.queuedCount} submissions queued)` : "");
  el<HTMLButtonElement>("study-submit").disabled = !controller.canSubmit;
}

async function startStudy(): Promise<void> {
  const participant = el<HTMLInputElement>("study-participant").value.trim();
  if (!participant) {
    toast("participant id required");
    return;
  }
  controller = new StudySessionController(api, participant);
  await controller.loadTasks();
  await showCurrentTask();
}

async function showCurrentTask(): Promise<void> {
  if (!controller) return;
  renderStudyState();
  if (controller.finished) return;
  const container = el<HTMLDivElement>("study-results");
  try {
    const response = await controller.runQuery(10);
    container.innerHTML = renderResultsGrid(response.hits, {
      imageUrl: (id) => api.imageUrl(id),
      cutoffDate: response.cutoff_date,
    });
  } catch (err) {
    const detail = err instanceof ApiError ? err.detail : String(err);
    toast(`Could not load task results: ${detail}`, showCurrentTask);
  }
  renderStudyState();
}

async function submitStudyTask(): Promise<void> {
  if (!controller) return;
  try {
    const outcome = await controller.submitCurrent();
    if (outcome === "queued") toast("Offline: submission queued, will retry.");
    controller.advance();
    if (controller.queuedCount) await controller.flushQueue();
    await showCurrentTask();
  } catch (err) {
    toast(err instanceof ApiError ? err.detail : String(err));
  }
}

/* ------------------------------ report tab ------------------------------ */

async function loadReport(): Promise<void> {
  const container = el<HTMLDivElement>("report-body");
  try {
    container.innerHTML = renderStudyReport(await api.fetchReport());
  } catch (err) {
    if (err instanceof ApiError) {
      container.innerHTML = renderReportError(err.status, err.detail);
    } else {
      container.innerHTML = renderReportError(0, String(err));
    }
  }
}

/* -------------------------------- wiring -------------------------------- */

export function bootstrap(): void {
  el<HTMLButtonElement>("search-go").addEventListener("click", runSearch);
  el<HTMLButtonElement>("study-start").addEventListener("click", startStudy);
  el<HTMLButtonElement>("study-submit").addEventListener("click", submitStudyTask);
  el<HTMLButtonElement>("report-load").addEventListener("click", loadReport);
  document.querySelectorAll<HTMLInputElement>("input[name=satisfaction]").forEach(
    (radio) =>
      radio.addEventListener("change", () => {
        controller?.setSatisfaction(parseInt(radio.value, 10));
        renderStudyState();
      }),
  );
  document.querySelectorAll<HTMLButtonElement>("[data-tab]").forEach((button) =>
    button.addEventListener("click", () => {
      document.querySelectorAll<HTMLElement>(".tab-panel").forEach((panel) => {
        panel.hidden = panel.id !== `tab-${button.dataset.tab}`;
      });
    }),
  );
}

if (typeof document !== "undefined" && document.readyState !== "loading") {
  bootstrap();
} else if (typeof document !== "undefined") {
  document.addEventListener("DOMContentLoaded", bootstrap);
}
